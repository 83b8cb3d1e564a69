use crate::autodiff::{ParamStore, Tensor};
use crate::descriptors::FPFH_DIM;
use crate::error::{Error, Result};
use crate::mesh::StructureId;

/// Standard deviations below this are replaced by 1 so constant channels
/// pass through centred but unscaled.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension affine standardization `(x − mean) / std`, fitted on
/// training samples. Statistics are stored at 32-bit so a reloaded
/// checkpoint reproduces training-time inputs exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    /// Population statistics over `rows`, each of width `dim`.
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape("standardize", format!("row of width {} vs {dim}", r.len())));
            }
            n += 1;
            for (c, &x) in r.iter().enumerate() {
                sum[c] += x as f64;
                sq[c] += (x as f64) * (x as f64);
            }
        }
        if n == 0 {
            return Err(Error::Invalid("cannot fit standardization on zero training samples".into()));
        }
        let mut mean = Vec::with_capacity(dim);
        let mut std = Vec::with_capacity(dim);
        for c in 0..dim {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            let s = var.sqrt();
            mean.push(m as f32);
            std.push(if s < STD_FLOOR { 1.0 } else { s as f32 });
        }
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes rows of width `dim()` laid out contiguously.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.dim();
        x.iter().enumerate().map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d]).collect()
    }
}

/// Everything fitted on the training split that inference must reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    /// One per structure, canonical order; present for shape-branch models.
    pub fpfh: Option<Vec<Standardizer>>,
    /// Standardization of the head's vector input (image or fused).
    pub input: Option<Standardizer>,
    /// Regression target mean and std; `(0, 1)` for classification.
    pub target: (f32, f32),
    /// Pseudo-coordinate scale per structure.
    pub pseudo_scales: Vec<f32>,
}

impl Normalizer {
    pub fn target_to_model(&self, y: f64) -> f64 {
        (y - self.target.0 as f64) / self.target.1 as f64
    }

    pub fn target_from_model(&self, y: f64) -> f64 {
        y * self.target.1 as f64 + self.target.0 as f64
    }

    /// Buffers stored in checkpoints next to the parameters, all under
    /// `norm.`.
    pub fn to_buffers(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![
            ("norm.target".to_string(), Tensor::vector(vec![self.target.0, self.target.1])),
            ("norm.pseudo_scale".to_string(), Tensor::vector(self.pseudo_scales.clone())),
        ];
        if let Some(f) = &self.fpfh {
            let flat = |sel: fn(&Standardizer) -> &Vec<f32>| f.iter().flat_map(|s| sel(s).iter().copied()).collect::<Vec<_>>();
            out.push((
                "norm.fpfh.mean".into(),
                Tensor::new(vec![f.len(), FPFH_DIM], flat(|s| &s.mean)).expect("15x33"),
            ));
            out.push((
                "norm.fpfh.std".into(),
                Tensor::new(vec![f.len(), FPFH_DIM], flat(|s| &s.std)).expect("15x33"),
            ));
        }
        if let Some(s) = &self.input {
            out.push(("norm.input.mean".into(), Tensor::vector(s.mean.clone())));
            out.push(("norm.input.std".into(), Tensor::vector(s.std.clone())));
        }
        out
    }

    pub fn from_buffers(store: &ParamStore<f32>) -> Result<Self> {
        let need = |name: &str| {
            store
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks buffer '{name}'")))
        };
        let target = need("norm.target")?.data();
        if target.len() != 2 {
            return Err(Error::shape("load_normalizer", "norm.target must hold 2 values"));
        }
        let pseudo_scales = need("norm.pseudo_scale")?.data().to_vec();
        if pseudo_scales.len() != StructureId::COUNT {
            return Err(Error::shape("load_normalizer", "norm.pseudo_scale must hold 15 values"));
        }
        let fpfh = match (store.get("norm.fpfh.mean"), store.get("norm.fpfh.std")) {
            (Some(m), Some(s)) if m.shape() == [StructureId::COUNT, FPFH_DIM] && s.shape() == m.shape() => Some(
                (0..StructureId::COUNT)
                    .map(|i| Standardizer {
                        mean: m.data()[i * FPFH_DIM..(i + 1) * FPFH_DIM].to_vec(),
                        std: s.data()[i * FPFH_DIM..(i + 1) * FPFH_DIM].to_vec(),
                    })
                    .collect(),
            ),
            (None, None) => None,
            _ => return Err(Error::shape("load_normalizer", "malformed norm.fpfh buffers")),
        };
        let input = match (store.get("norm.input.mean"), store.get("norm.input.std")) {
            (Some(m), Some(s)) if m.shape() == s.shape() => {
                Some(Standardizer { mean: m.data().to_vec(), std: s.data().to_vec() })
            }
            (None, None) => None,
            _ => return Err(Error::shape("load_normalizer", "malformed norm.input buffers")),
        };
        Ok(Normalizer { fpfh, input, target: (target[0], target[1]), pseudo_scales })
    }
}
