//! Low-rank adapters on the seven prunable projections and the three
//! decision-aware forward modes.
//!
//! For a projection `X·W` with adapter factors `Wa [m×r]`, `Wb [r×n]` and an
//! output decision `D = diag(d)`:
//!
//! * dense: `X·W + (X·Wa)·Wb`
//! * G-mode: `(X·W + (X·Wa)·Wb)·D`, both contributions masked
//! * L-mode: `(X·W)·D + (X·Wa)·Wb`, only the frozen base masked
//!
//! L-mode keeps gradients flowing into adapter columns of currently pruned
//! outputs; G-mode is what the compacted model computes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{matmul, Graph, Scalar, Tensor, Var};

/// Forward semantics of every prunable projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dense,
    G,
    L,
}

/// Which decision vector of a layer a projection is tied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskSource {
    Qk,
    V,
    Gu,
}

/// The seven prunable projections of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Q,
        Role::K,
        Role::V,
        Role::O,
        Role::Gate,
        Role::Up,
        Role::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "wq",
            Role::K => "wk",
            Role::V => "wv",
            Role::O => "wo",
            Role::Gate => "wg",
            Role::Up => "wu",
            Role::Down => "wd",
        }
    }

    /// Decision that masks this projection's output columns. `O` and `Down`
    /// write into the residual stream and are never output-masked.
    pub fn out_mask(self) -> Option<MaskSource> {
        match self {
            Role::Q | Role::K => Some(MaskSource::Qk),
            Role::V => Some(MaskSource::V),
            Role::Gate | Role::Up => Some(MaskSource::Gu),
            Role::O | Role::Down => None,
        }
    }

    /// Decision of the preceding projection, which prunes this projection's
    /// input rows.
    pub fn in_mask(self) -> Option<MaskSource> {
        match self {
            Role::O => Some(MaskSource::V),
            Role::Down => Some(MaskSource::Gu),
            _ => None,
        }
    }
}

/// Trainable factors of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<T> {
    /// `m × r`
    pub a: Tensor<T>,
    /// `r × n`
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraFactors<T> {
    /// `Wa ~ N(0, 0.02²)`, `Wb = 0`.
    pub fn init(m: usize, n: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Contract(format!(
                "adapter rank {rank} outside [1, {}] for a {m}×{n} projection",
                m.min(n)
            )));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let a = (0..m * rank).map(|_| T::lit(normal.sample(rng))).collect();
        Ok(Self {
            a: Tensor::matrix(m, rank, a),
            b: Tensor::zeros(rank, n),
        })
    }

    pub fn product(&self) -> Tensor<T> {
        matmul(&self.a, &self.b).expect("adapter factor shapes")
    }
}

/// A frozen base matrix with its adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear<T> {
    pub role: Role,
    /// `m × n`, never updated.
    pub w: Tensor<T>,
    pub lora: LoraFactors<T>,
}

fn decision_row<T: Scalar>(d: &[bool], n: usize) -> Result<Vec<T>> {
    if d.len() != n {
        return Err(Error::Shape(format!(
            "decision length {} does not match output width {n}",
            d.len()
        )));
    }
    Ok(d.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
}

impl<T: Scalar> LoraLinear<T> {
    /// Fresh adapter on `w` seeded from the init stream.
    pub fn init_adapter(role: Role, w: Tensor<T>, rank: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        let lora = LoraFactors::init(w.rows(), w.cols(), rank, &mut rng)?;
        Ok(Self { role, w, lora })
    }

    fn mask(&self, d: Option<&[bool]>) -> Result<Option<Vec<T>>> {
        d.map(|d| decision_row(d, self.w.cols())).transpose()
    }

    fn base_and_adapter(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let xw = matmul(x, &self.w)?;
        let xab = matmul(&matmul(x, &self.lora.a)?, &self.lora.b)?;
        Ok((xw, xab))
    }

    /// `X·(W + Wa·Wb)·D`; `d = None` means `D = I`.
    pub fn forward_g(&self, x: &Tensor<T>, d: Option<&[bool]>) -> Result<Tensor<T>> {
        let mask = self.mask(d)?;
        let (xw, xab) = self.base_and_adapter(x)?;
        let sum = xw.add(&xab);
        Ok(match mask {
            Some(m) => sum.mul_cols(&m),
            None => sum,
        })
    }

    /// `X·(W·D + Wa·Wb)`.
    pub fn forward_l(&self, x: &Tensor<T>, d: Option<&[bool]>) -> Result<Tensor<T>> {
        let mask = self.mask(d)?;
        let (xw, xab) = self.base_and_adapter(x)?;
        Ok(match mask {
            Some(m) => xw.mul_cols(&m).add(&xab),
            None => xw.add(&xab),
        })
    }

    /// `forward_l − forward_g`, which equals `X·Wa·Wb·(I − D)`.
    pub fn mode_gap(&self, x: &Tensor<T>, d: Option<&[bool]>) -> Result<Tensor<T>> {
        Ok(self.forward_l(x, d)?.sub(&self.forward_g(x, d)?))
    }

    /// `W + Wa·Wb`.
    pub fn merge(&self) -> Tensor<T> {
        self.w.add(&self.lora.product())
    }
}

/// Adapters for every projection of every decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters<T> {
    pub rank: usize,
    /// Indexed by layer, then by [`Role::index`].
    pub layers: Vec<Vec<LoraFactors<T>>>,
}

impl<T: Scalar> Adapters<T> {
    /// Fresh adapters shaped like `base` projections (`shapes[layer][role]`).
    pub fn init(shapes: &[[(usize, usize); 7]], rank: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::AdapterInit);
        let layers = shapes
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&(m, n)| LoraFactors::init(m, n, rank, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rank, layers })
    }

    pub fn get(&self, layer: usize, role: Role) -> &LoraFactors<T> {
        &self.layers[layer][role.index()]
    }

    pub fn get_mut(&mut self, layer: usize, role: Role) -> &mut LoraFactors<T> {
        &mut self.layers[layer][role.index()]
    }

    /// Flat list of every factor, `a` before `b`, layer-major.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|f| [&f.a, &f.b]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(|f| [&mut f.a, &mut f.b]))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AdapterVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.iter()
                    .map(|f| {
                        if trainable {
                            (g.param(f.a.clone()), g.param(f.b.clone()))
                        } else {
                            (g.constant(f.a.clone()), g.constant(f.b.clone()))
                        }
                    })
                    .collect()
            })
            .collect();
        AdapterVars { layers }
    }

    pub fn cast<U: Scalar>(&self) -> Adapters<U> {
        Adapters {
            rank: self.rank,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|f| LoraFactors {
                            a: f.a.cast(),
                            b: f.b.cast(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Graph handles of bound [`Adapters`]: `layers[n][role] = (a, b)`.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub layers: Vec<Vec<(Var, Var)>>,
}

impl AdapterVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|&(a, b)| [a, b]))
            .collect()
    }
}

/// One projection on the graph under `mode`. `mask` is the `1×n` output
/// decision row (already tiled across heads); `None` means identity.
pub fn project<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    mask: Option<Var>,
    mode: Mode,
) -> Var {
    let xw = g.matmul(x, w);
    let xab = adapter.map(|(a, b)| {
        let xa = g.matmul(x, a);
        g.matmul(xa, b)
    });
    match (mode, mask, xab) {
        (Mode::Dense, _, Some(xab)) | (_, None, Some(xab)) => g.add(xw, xab),
        (Mode::Dense, _, None) | (_, None, None) => xw,
        (Mode::G, Some(m), Some(xab)) => {
            let s = g.add(xw, xab);
            g.mul_row(s, m)
        }
        (Mode::L, Some(m), Some(xab)) => {
            let masked = g.mul_row(xw, m);
            g.add(masked, xab)
        }
        (_, Some(m), None) => g.mul_row(xw, m),
    }
}
