//! LoRA-factorized layers and the two toy models used by the experiments.
//!
//! A [`LoraLayer`] holds a frozen `k×d` base weight `W0`, trainable factors
//! `A` (`r×d`) and `B` (`k×r`) and the scale `s = alpha / r`; its effective
//! weight is `W0 + s·B·A`. The toy models differentiate by hand and report
//! the gradient with respect to that merged weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{jacobi_svd, Matrix, SeededRng};

/// Initialization policy for one factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `N(0, 1/r²)` entries.
    Gaussian,
    /// Uniform in `±1/√fan_in` (`kaiming_uniform` with `a = √5`).
    Kaiming,
    /// Top-`r` singular vectors of `W0`.
    Spectral,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    w0: Matrix,
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
    alpha: f64,
    rank: usize,
    scale: f64,
}

impl LoraLayer {
    pub fn new(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let (k, d) = w0.shape();
        let r = a.rows();
        if a.cols() != d {
            return Err(Error::shape("lora A", a.shape(), (r, d)));
        }
        if b.shape() != (k, r) {
            return Err(Error::shape("lora B", b.shape(), (k, r)));
        }
        if r == 0 || r > k.min(d) {
            return Err(Error::InvalidConfig(format!(
                "rank {r} must lie in 1..={}",
                k.min(d)
            )));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            w0,
            a,
            b,
            alpha,
            rank: r,
            scale: alpha / r as f64,
        })
    }

    /// Builds a layer with factors drawn from the given policies.
    pub fn init(
        w0: Matrix,
        rank: usize,
        alpha: f64,
        init_a: InitPolicy,
        init_b: InitPolicy,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (k, d) = w0.shape();
        if rank == 0 || rank > k.min(d) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must lie in 1..={}",
                k.min(d)
            )));
        }
        let svd = if init_a == InitPolicy::Spectral || init_b == InitPolicy::Spectral {
            Some(jacobi_svd(&w0))
        } else {
            None
        };
        let a = match init_a {
            InitPolicy::Gaussian => rng.gaussian_matrix(rank, d, 1.0 / rank as f64),
            InitPolicy::Kaiming => rng.uniform_matrix(rank, d, 1.0 / (d as f64).sqrt()),
            InitPolicy::Spectral => {
                let v = &svd.as_ref().expect("svd computed").v;
                Matrix::from_fn(rank, d, |i, j| v[(j, i)])
            }
            InitPolicy::Zero => Matrix::zeros(rank, d),
        };
        let b = match init_b {
            InitPolicy::Gaussian => rng.gaussian_matrix(k, rank, 1.0 / rank as f64),
            InitPolicy::Kaiming => rng.uniform_matrix(k, rank, 1.0 / (rank as f64).sqrt()),
            InitPolicy::Spectral => {
                let u = &svd.as_ref().expect("svd computed").u;
                Matrix::from_fn(k, rank, |i, j| u[(i, j)])
            }
            InitPolicy::Zero => Matrix::zeros(k, rank),
        };
        Self::new(w0, a, b, alpha)
    }

    /// Same base weight and alpha, new factors.
    pub fn with_factors(&self, a: Matrix, b: Matrix) -> Result<Self> {
        Self::new(self.w0.clone(), a, b, self.alpha)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `s = alpha / r`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `(k, d)` of the adapted weight.
    pub fn dims(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn trainable_entries(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `W0 + s·B·A`.
    pub fn merged_weight(&self) -> Matrix {
        let mut w = self.w0.clone();
        if !self.b.is_zero() {
            let ba = self.b.matmul_unchecked(&self.a);
            w.axpy(self.scale, &ba).expect("BA is k×d");
        }
        w
    }

    /// `s·B·A` alone.
    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul_unchecked(&self.a).scale(self.scale)
    }
}

/// Gradient of the loss with respect to the merged weight of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGradient {
    pub g: Matrix,
    pub layer_id: usize,
}

impl FullGradient {
    pub fn new(g: Matrix) -> Self {
        Self { g, layer_id: 0 }
    }
}

/// `(∇_A L, ∇_B L) = (s·Bᵀ·G, s·G·Aᵀ)`.
pub fn lora_grads(g: &Matrix, layer: &LoraLayer) -> Result<(Matrix, Matrix)> {
    if g.shape() != layer.dims() {
        return Err(Error::shape("lora_grads", g.shape(), layer.dims()));
    }
    let s = layer.scale;
    let grad_a = layer.b.t_matmul(g)?.scale(s);
    let grad_b = g.matmul_t(&layer.a)?.scale(s);
    Ok((grad_a, grad_b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    TwoLayerRelu,
}

/// A single adapted layer, optionally followed by ReLU and a frozen dense head.
/// Loss is `(1/m)·‖Y − Y*‖²_F` over a batch of `m` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub kind: ModelKind,
    pub layer: LoraLayer,
    head: Option<Matrix>,
}

/// Activations kept by [`ToyModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    pre_activation: Matrix,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl ToyModel {
    pub fn linear(layer: LoraLayer) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            layer,
            head: None,
        }
    }

    /// `Y = head · relu((W0 + sBA)·X)`; `head` is frozen.
    pub fn two_layer_relu(layer: LoraLayer, head: Matrix) -> Result<Self> {
        if head.cols() != layer.dims().0 {
            return Err(Error::shape("relu head", head.shape(), layer.dims()));
        }
        Ok(Self {
            kind: ModelKind::TwoLayerRelu,
            layer,
            head: Some(head),
        })
    }

    pub fn head(&self) -> Option<&Matrix> {
        self.head.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.rows(),
            None => self.layer.dims().0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer.dims().1
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let w = self.layer.merged_weight();
        let pre = w.matmul(x)?;
        let y = match &self.head {
            None => pre.clone(),
            Some(head) => head.matmul(&pre.map(relu))?,
        };
        let cache = ForwardCache {
            input: x.clone(),
            pre_activation: pre,
            output: y.clone(),
        };
        Ok((y, cache))
    }

    pub fn loss(&self, x: &Matrix, target: &Matrix) -> Result<f64> {
        let (y, _) = self.forward(x)?;
        mse(&y, target)
    }

    /// `∂L/∂W` for the adapted layer, from a cache produced by [`ToyModel::forward`].
    pub fn full_gradient(&self, target: &Matrix, cache: &ForwardCache) -> Result<FullGradient> {
        let y = &cache.output;
        if y.shape() != target.shape() {
            return Err(Error::shape("full_gradient", y.shape(), target.shape()));
        }
        let m = y.cols() as f64;
        let dy = y.sub(target)?.scale(2.0 / m);
        let dz = match &self.head {
            None => dy,
            Some(head) => {
                let dh = head.t_matmul(&dy)?;
                dh.zip_with(&cache.pre_activation, "relu backward", |g, z| {
                    if z > 0.0 {
                        g
                    } else {
                        0.0
                    }
                })?
            }
        };
        Ok(FullGradient::new(dz.matmul_t(&cache.input)?))
    }

    /// Loss and merged-weight gradient in one call.
    pub fn loss_and_gradient(&self, x: &Matrix, target: &Matrix) -> Result<(f64, FullGradient)> {
        let (y, cache) = self.forward(x)?;
        let loss = mse(&y, target)?;
        let g = self.full_gradient(target, &cache)?;
        Ok((loss, g))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `(1/m)·‖Y − T‖²_F` with `m` the number of columns.
pub fn mse(y: &Matrix, target: &Matrix) -> Result<f64> {
    let diff = y.sub(target)?;
    let m = y.cols() as f64;
    Ok(diff.as_slice().iter().map(|v| v * v).sum::<f64>() / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> LoraLayer {
        LoraLayer::new(w0, a, b, alpha).unwrap()
    }

    #[test]
    fn zero_b_leaves_base_weight() {
        let l = layer(
            Matrix::identity(2),
            Matrix::from_rows(&[[3.0, -7.0]]),
            Matrix::zeros(2, 1),
            1.0,
        );
        let model = ToyModel::linear(l.clone());
        let (y, _) = model.forward(&Matrix::identity(2)).unwrap();
        assert_eq!(y, Matrix::identity(2));
        assert_eq!(l.merged_weight(), Matrix::identity(2));
    }

    #[test]
    fn scaled_rank_one_forward() {
        // alpha = 2, r = 1 gives s = 2.
        let l = layer(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
            2.0,
        );
        assert_eq!(l.scale(), 2.0);
        let (y, _) = ToyModel::linear(l).forward(&Matrix::identity(2)).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn merged_weight_of_outer_product() {
        let l = layer(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0, 2.0]]),
            Matrix::from_rows(&[[1.0], [1.0]]),
            1.0,
        );
        assert_eq!(l.merged_weight(), Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]));
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let mut rng = SeededRng::new(1);
        let l = LoraLayer::init(
            rng.gaussian_matrix(3, 4, 1.0),
            2,
            2.0,
            InitPolicy::Gaussian,
            InitPolicy::Gaussian,
            &mut rng,
        )
        .unwrap();
        let model = ToyModel::linear(l);
        let x = rng.gaussian_matrix(4, 5, 1.0);
        let (y, cache) = model.forward(&x).unwrap();
        let g = model.full_gradient(&y, &cache).unwrap();
        assert!(g.g.is_zero());
    }

    #[test]
    fn zero_weight_least_squares_gradient() {
        let l = layer(Matrix::zeros(2, 2), Matrix::zeros(1, 2), Matrix::zeros(2, 1), 1.0);
        let model = ToyModel::linear(l);
        let target = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let (_, g) = model.loss_and_gradient(&Matrix::identity(2), &target).unwrap();
        // m = 2 columns: G = -(2/m)·T = -T.
        assert_eq!(g.g, target.scale(-1.0));
    }

    #[test]
    fn lora_grads_small_cases() {
        let g = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]);

        let zero_b = layer(Matrix::zeros(2, 2), Matrix::from_rows(&[[5.0, 1.0]]), Matrix::zeros(2, 1), 1.0);
        let (ga, _) = lora_grads(&g, &zero_b).unwrap();
        assert!(ga.is_zero());

        let unit_b = layer(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
            1.0,
        );
        let (ga, _) = lora_grads(&g, &unit_b).unwrap();
        assert_eq!(ga, Matrix::from_rows(&[[2.0, 0.0]]));

        let s_two = layer(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
            2.0,
        );
        let (_, gb) = lora_grads(&g, &s_two).unwrap();
        assert_eq!(gb, Matrix::from_rows(&[[4.0], [0.0]]));
    }

    #[test]
    fn shape_checks() {
        let l = layer(Matrix::zeros(2, 3), Matrix::zeros(1, 3), Matrix::zeros(2, 1), 1.0);
        assert!(lora_grads(&Matrix::zeros(3, 2), &l).is_err());
        assert!(LoraLayer::new(Matrix::zeros(2, 3), Matrix::zeros(1, 2), Matrix::zeros(2, 1), 1.0).is_err());
        assert!(LoraLayer::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3), Matrix::zeros(2, 3), 1.0).is_err());
        let model = ToyModel::linear(l);
        assert!(model.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn spectral_init_uses_singular_vectors() {
        let mut rng = SeededRng::new(3);
        let w0 = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let l = LoraLayer::init(w0, 2, 2.0, InitPolicy::Spectral, InitPolicy::Spectral, &mut rng).unwrap();
        let ab = l.a().matmul_t(l.a()).unwrap();
        assert!(ab.rel_err(&Matrix::identity(2)) < 1e-14);
        assert!((l.a()[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((l.b()[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }
}
