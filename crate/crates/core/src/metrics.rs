//! Proxy metrics for structure preservation and appearance fidelity on toy latents.

use serde::{Deserialize, Serialize};

use crate::control::spatial_mask;
use crate::error::{DrfError, Result};
use crate::latent::{mean_std, Latent};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub struct_threshold: f64,
    pub app_threshold: f64,
    pub patch: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            struct_threshold: 0.7,
            app_threshold: 0.3,
            patch: 4,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.struct_threshold) {
            return Err(DrfError::config(
                "metrics.struct_threshold",
                "must lie in [0, 1]",
            ));
        }
        if !(self.app_threshold >= 0.0) {
            return Err(DrfError::config("metrics.app_threshold", "must be >= 0"));
        }
        if self.patch == 0 {
            return Err(DrfError::config("metrics.patch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub struct_iou: f64,
    pub app_stat_dist: f64,
    pub self_sim_dist: f64,
    pub success: bool,
}

/// `|a & b| / |a | b|`, 1 when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DrfError::Precondition(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Euclidean norm of the per-channel (mean, std) differences.
pub fn appearance_stat_distance(gen: &Latent, app: &Latent) -> Result<f64> {
    gen.ensure_same_shape(app)?;
    let mut sq = 0.0;
    for c in 0..gen.shape().channels {
        let (mg, sg) = mean_std(gen.channel(c));
        let (ma, sa) = mean_std(app.channel(c));
        sq += (mg - ma).powi(2) + (sg - sa).powi(2);
    }
    Ok(sq.sqrt())
}

/// Cosine-similarity matrix between all non-overlapping `patch x patch` blocks, each
/// flattened over channels. Zero patches have similarity 0 with everything.
pub fn patch_gram(z: &Latent, patch: usize) -> Result<Vec<f64>> {
    let s = z.shape();
    if patch == 0 || !s.height.is_multiple_of(patch) || !s.width.is_multiple_of(patch) {
        return Err(DrfError::config(
            "metrics.patch",
            format!("patch {patch} must divide {}x{}", s.height, s.width),
        ));
    }
    let (ph, pw) = (s.height / patch, s.width / patch);
    let mut vecs = Vec::with_capacity(ph * pw);
    for by in 0..ph {
        for bx in 0..pw {
            let mut v = Vec::with_capacity(s.channels * patch * patch);
            for c in 0..s.channels {
                let ch = z.channel(c);
                for y in 0..patch {
                    let row = (by * patch + y) * s.width + bx * patch;
                    v.extend_from_slice(&ch[row..row + patch]);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            vecs.push(v);
        }
    }
    let p = vecs.len();
    let mut gram = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            gram[i * p + j] = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(gram)
}

/// Frobenius distance between the patch cosine-similarity matrices of two latents.
pub fn patch_self_similarity_distance(
    gen: &Latent,
    struct_ref: &Latent,
    patch: usize,
) -> Result<f64> {
    gen.ensure_same_shape(struct_ref)?;
    let a = patch_gram(gen, patch)?;
    let b = patch_gram(struct_ref, patch)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Scores a generated latent against the structure and appearance references.
pub fn evaluate(
    gen: &Latent,
    z0_structure: &Latent,
    z0_appearance: &Latent,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let struct_iou = mask_iou(&spatial_mask(gen), &spatial_mask(z0_structure))?;
    let app_stat_dist = appearance_stat_distance(gen, z0_appearance)?;
    let self_sim_dist = patch_self_similarity_distance(gen, z0_structure, cfg.patch)?;
    Ok(MetricReport {
        struct_iou,
        app_stat_dist,
        self_sim_dist,
        success: struct_iou >= cfg.struct_threshold && app_stat_dist <= cfg.app_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;

    #[test]
    fn iou_examples() {
        let full = vec![true; 256];
        let left: Vec<bool> = (0..256).map(|i| i % 16 < 8).collect();
        assert_eq!(mask_iou(&left, &full).unwrap(), 0.5);
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);
        let right: Vec<bool> = left.iter().map(|v| !v).collect();
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(mask_iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn stat_distance_shift() {
        let shape = Shape::new(3, 4, 4);
        let a =
            Latent::from_vec(shape, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = a.map(|v| v + 0.2);
        assert!((appearance_stat_distance(&b, &a).unwrap() - 3f64.sqrt() * 0.2).abs() < 1e-12);
        assert_eq!(appearance_stat_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn self_similarity_hand_example() {
        // 1 channel, 2x2 latent, 1x1 patches: cosine of scalars is their sign product.
        let shape = Shape::new(1, 2, 2);
        let g = Latent::from_vec(shape, vec![1.0, -2.0, 0.0, 3.0]).unwrap();
        let r = Latent::from_vec(shape, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // gram(g) rows: [1,-1,0,1],[-1,1,0,-1],[0,0,0,0],[1,-1,0,1]; gram(r) = all ones.
        // Differences: 4 entries of magnitude 2, 7 of magnitude 1 -> sqrt(16 + 7) = sqrt(23).
        let d = patch_self_similarity_distance(&g, &r, 1).unwrap();
        assert!((d - 23f64.sqrt()).abs() < 1e-12, "{d}");
        assert_eq!(
            patch_self_similarity_distance(&g, &g.scale(3.0), 1).unwrap(),
            0.0
        );
        assert!(patch_self_similarity_distance(&g, &r, 3).is_err());
    }
}
