use serde::{Deserialize, Serialize};

/// Conditioning of a network on the time `t in [0, T]`.
///
/// Both variants work on the normalized time `u = t / T`.
/// `Scalar` appends `u` alone (dimension 1). `Sinusoidal { frequencies: k }`
/// appends `u, sin(pi j u), cos(pi j u)` for `j = 1..=k` (dimension `2k + 1`);
/// every component is Lipschitz in `t` with constant at most `pi k / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeEmbedding {
    Scalar,
    Sinusoidal { frequencies: usize },
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding::Sinusoidal { frequencies: 8 }
    }
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        match *self {
            TimeEmbedding::Scalar => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies + 1,
        }
    }

    pub fn write(&self, t: f64, horizon: f64, out: &mut [f64]) {
        let u = t / horizon;
        out[0] = u;
        if let TimeEmbedding::Sinusoidal { frequencies } = *self {
            for j in 0..frequencies {
                let w = std::f64::consts::PI * (j + 1) as f64 * u;
                out[1 + 2 * j] = w.sin();
                out[2 + 2 * j] = w.cos();
            }
        }
    }

    pub fn embed(&self, t: f64, horizon: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.write(t, horizon, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_and_lipschitz() {
        assert_eq!(TimeEmbedding::Scalar.dim(), 1);
        let e = TimeEmbedding::default();
        assert_eq!(e.dim(), 17);
        let lip = std::f64::consts::PI * 8.0 / 2.0;
        let h = 1e-3;
        for i in 0..100 {
            let t = 2.0 * i as f64 / 100.0;
            let a = e.embed(t, 2.0);
            let b = e.embed(t + h, 2.0);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= lip * h * 1.0001);
            }
        }
    }
}
