//! Sparsity constraint, LoRA-aware group lasso, and the two composite
//! objectives optimized by the alternating loop.

use crate::adapters::{AdapterVars, Adapters, MaskSource, Role};
use crate::error::{Error, Result};
use crate::model::{DecisionSet, LayerDecisions, MaskVars, ModelConfig};
use crate::numerics::{group_l2, Graph, Scalar, Var};

/// Desired sparsity `p` against a total of `P_total` decoder parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityTarget {
    pub p: f64,
    pub p_total: u64,
}

impl SparsityTarget {
    pub fn new(p: f64, p_total: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("sparsity p = {p} outside [0, 1)")));
        }
        if p_total == 0 {
            return Err(Error::Config("P_total must be positive".into()));
        }
        Ok(Self { p, p_total })
    }

    pub fn for_model(config: &ModelConfig, p: f64) -> Result<Self> {
        Self::new(p, config.total_decoder_params())
    }

    /// `r = 1 − p`.
    pub fn retain(&self) -> f64 {
        1.0 - self.p
    }

    /// `r·P_total`.
    pub fn target_params(&self) -> f64 {
        self.retain() * self.p_total as f64
    }
}

/// `L_s = |ln max(R, 1) − ln(r·P_total)|`.
pub fn sparsity_loss(remaining: f64, target: SparsityTarget) -> f64 {
    (remaining.max(1.0).ln() - target.target_params().ln()).abs()
}

/// `R(d_all)` on the graph as a linear function of the decision rows, so the
/// loss is differentiable through whatever produced them.
pub fn remaining_graph<T: Scalar>(g: &mut Graph<T>, masks: &MaskVars, config: &ModelConfig) -> Var {
    let dh = config.d_hidden as f64;
    let attn = 2.0 * dh * config.n_heads as f64;
    let mut total: Option<Var> = None;
    for l in &masks.layers {
        let terms = [(l.qk, attn), (l.v, attn), (l.gu, 3.0 * dh)];
        for (row, coef) in terms {
            let s = g.sum(row);
            let s = g.scale(s, T::lit(coef));
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
    }
    let norms = 2.0 * dh * masks.layers.len() as f64;
    match total {
        Some(t) => g.add_scalar(t, T::lit(norms)),
        None => g.constant(crate::numerics::Tensor::scalar(T::lit(norms))),
    }
}

/// [`sparsity_loss`] on the graph.
pub fn sparsity_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    masks: &MaskVars,
    config: &ModelConfig,
    target: SparsityTarget,
) -> Var {
    let r = remaining_graph(g, masks, config);
    let r = g.clamp_min(r, T::one());
    let l = g.ln(r);
    let l = g.add_scalar(l, T::lit(-target.target_params().ln()));
    g.abs(l)
}

/// Pruned groups of one adapter as flat indices: columns of `Wb [r×n]` whose
/// output is pruned, then rows of `Wa [m×r]` whose input is pruned.
pub fn pruned_groups(
    role: Role,
    a_shape: (usize, usize),
    b_shape: (usize, usize),
    layer: &LayerDecisions,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let (m, r) = a_shape;
    let n = b_shape.1;
    let pruned = |src: MaskSource, j: usize| {
        let bits = layer.get(src);
        !bits[j % bits.len()]
    };
    let b_groups = match role.out_mask() {
        Some(src) => (0..n)
            .filter(|&j| pruned(src, j))
            .map(|j| (0..r).map(|i| i * n + j).collect())
            .collect(),
        None => Vec::new(),
    };
    let a_groups = match role.in_mask() {
        Some(src) => (0..m)
            .filter(|&i| pruned(src, i))
            .map(|i| (0..r).map(|k| i * r + k).collect())
            .collect(),
        None => Vec::new(),
    };
    (b_groups, a_groups)
}

fn shape2<T: Scalar>(t: &crate::numerics::Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `L_gl`: sum of L2 norms of every pruned adapter group.
pub fn group_lasso<T: Scalar>(adapters: &Adapters<T>, decisions: &DecisionSet) -> Result<T> {
    let mut total = T::zero();
    for (layer, dec) in adapters.layers.iter().zip(&decisions.layers) {
        for (role, f) in Role::ALL.iter().zip(layer) {
            let (bg, ag) = pruned_groups(*role, shape2(&f.a), shape2(&f.b), dec);
            for grp in &bg {
                total = total + group_l2(&f.b, grp)?;
            }
            for grp in &ag {
                total = total + group_l2(&f.a, grp)?;
            }
        }
    }
    Ok(total)
}

/// Largest L2 norm among pruned adapter groups (0 when none are pruned).
pub fn max_pruned_group_norm<T: Scalar>(adapters: &Adapters<T>, decisions: &DecisionSet) -> Result<T> {
    let mut worst = T::zero();
    for (layer, dec) in adapters.layers.iter().zip(&decisions.layers) {
        for (role, f) in Role::ALL.iter().zip(layer) {
            let (bg, ag) = pruned_groups(*role, shape2(&f.a), shape2(&f.b), dec);
            for grp in &bg {
                worst = worst.max(group_l2(&f.b, grp)?);
            }
            for grp in &ag {
                worst = worst.max(group_l2(&f.a, grp)?);
            }
        }
    }
    Ok(worst)
}

/// [`group_lasso`] on the graph, differentiable w.r.t. the adapter factors.
pub fn group_lasso_graph<T: Scalar>(g: &mut Graph<T>, adapters: &AdapterVars, decisions: &DecisionSet) -> Var {
    let mut total: Option<Var> = None;
    for (layer, dec) in adapters.layers.iter().zip(&decisions.layers) {
        for (role, &(a, b)) in Role::ALL.iter().zip(layer) {
            let (bg, ag) = pruned_groups(*role, shape2(g.value(a)), shape2(g.value(b)), dec);
            for (v, groups) in [(b, bg), (a, ag)] {
                if groups.is_empty() {
                    continue;
                }
                let s = g.group_l2_sum(v, groups);
                total = Some(match total {
                    Some(t) => g.add(t, s),
                    None => s,
                });
            }
        }
    }
    total.unwrap_or_else(|| g.constant(crate::numerics::Tensor::scalar(T::zero())))
}

/// `J_G = L_LM(G-mode) + α·L_s`.
pub fn objective_g<T: Scalar>(g: &mut Graph<T>, lm_loss: Var, s_loss: Var, alpha: f64) -> Var {
    let s = g.scale(s_loss, T::lit(alpha));
    g.add(lm_loss, s)
}

/// `J_L = L_LM(L-mode) + β·L_gl`.
pub fn objective_l<T: Scalar>(g: &mut Graph<T>, lm_loss: Var, gl_loss: Var, beta: f64) -> Var {
    let s = g.scale(gl_loss, T::lit(beta));
    g.add(lm_loss, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_remaining, Model};
    use crate::numerics::{Tensor, grad_check};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_adapters(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Adapters<f64> {
        let model = Model::<f64>::init(config.clone(), 1).unwrap();
        let mut ad = Adapters::init(&model.projection_shapes(), 3, 2).unwrap();
        for t in ad.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        ad
    }

    /// Builds `(I − D_prev)·Wa` and `Wb·(I − D)` as dense matrices and sums
    /// their row and column norms.
    fn materialized_oracle(ad: &Adapters<f64>, dec: &DecisionSet) -> f64 {
        let mut total = 0.0;
        for (layer, d) in ad.layers.iter().zip(&dec.layers) {
            for (role, f) in Role::ALL.iter().zip(layer) {
                let complement = |src: MaskSource, len: usize| -> Vec<f64> {
                    let bits = d.get(src);
                    (0..len).map(|i| if bits[i % bits.len()] { 0.0 } else { 1.0 }).collect()
                };
                if let Some(src) = role.out_mask() {
                    let wb = f.b.mul_cols(&complement(src, f.b.cols()));
                    for j in 0..wb.cols() {
                        total += (0..wb.rows()).map(|i| wb.get(i, j).powi(2)).sum::<f64>().sqrt();
                    }
                }
                if let Some(src) = role.in_mask() {
                    let wa = f.a.mul_rows(&complement(src, f.a.rows()));
                    for i in 0..wa.rows() {
                        total += wa.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    }
                }
            }
        }
        total
    }

    #[test]
    fn sparsity_loss_examples() {
        let t = SparsityTarget::new(0.5, 1000).unwrap();
        assert_eq!(sparsity_loss(500.0, t), 0.0);
        assert!((sparsity_loss(1000.0, t) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((sparsity_loss(250.0, t) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(sparsity_loss(0.0, t), sparsity_loss(1.0, t));
        assert!(SparsityTarget::new(1.0, 10).is_err());
        assert!(SparsityTarget::new(0.2, 0).is_err());
    }

    proptest! {
        #[test]
        fn sparsity_loss_is_log_ratio(c in 0.1f64..10.0, p in 0.0f64..0.9) {
            let t = SparsityTarget::new(p, 201_216).unwrap();
            let got = sparsity_loss(c * t.target_params(), t);
            prop_assert!((got - c.ln().abs()).abs() <= 1e-12);
        }
    }

    #[test]
    fn remaining_graph_matches_count() {
        let config = ModelConfig::small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let d = DecisionSet::random(&config, 0.6, &mut rng);
            let mut g = Graph::<f64>::new();
            let m = d.bind(&mut g);
            let r = remaining_graph(&mut g, &m, &config);
            assert_eq!(g.value(r).item(), count_remaining(&config, &d) as f64);
        }
        let all = DecisionSet::all_ones(&config);
        assert_eq!(count_remaining(&config, &all), config.total_decoder_params());
    }

    #[test]
    fn group_lasso_examples() {
        let config = ModelConfig::small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ad = random_adapters(&config, &mut rng);
        assert_eq!(group_lasso(&ad, &DecisionSet::all_ones(&config)).unwrap(), 0.0);

        let mut ad = ad;
        for t in ad.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut dec = DecisionSet::all_ones(&config);
        dec.layers[1].v[2] = false;
        // V head 0 column 2 with values (3, 4); head 1's copy stays zero
        let b = &mut ad.get_mut(1, Role::V).b;
        b.set(0, 2, 3.0);
        b.set(1, 2, 4.0);
        assert_eq!(group_lasso(&ad, &dec).unwrap(), 5.0);
    }

    #[test]
    fn group_lasso_matches_materialized_oracle() {
        let config = ModelConfig::small();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let ad = random_adapters(&config, &mut rng);
            let dec = DecisionSet::random(&config, 0.5, &mut rng);
            let want = materialized_oracle(&ad, &dec);
            assert!((group_lasso(&ad, &dec).unwrap() - want).abs() <= 1e-10);
            let mut g = Graph::new();
            let vars = ad.bind(&mut g, true);
            let gl = group_lasso_graph(&mut g, &vars, &dec);
            assert!((g.value(gl).item() - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn unpruned_entries_do_not_matter() {
        let config = ModelConfig::small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ad = random_adapters(&config, &mut rng);
        let dec = DecisionSet::random(&config, 0.5, &mut rng);
        let before = group_lasso(&ad, &dec).unwrap();
        // Q/K/V/gate/up Wa rows are never grouped; kept Wb columns neither
        for layer in 0..config.n_layers {
            ad.get_mut(layer, Role::Q).a.data_mut()[0] += 7.0;
            let kept = dec.layers[layer].gu.iter().position(|&b| b);
            if let Some(j) = kept {
                let b = &mut ad.get_mut(layer, Role::Up).b;
                let v = b.get(0, j);
                b.set(0, j, v - 3.0);
            }
        }
        assert_eq!(group_lasso(&ad, &dec).unwrap(), before);
    }

    #[test]
    fn group_gradient_points_along_column() {
        let col = Tensor::matrix(3, 1, vec![0.3f64, -1.2, 0.5]);
        let mut g = Graph::new();
        let v = g.param(col.clone());
        let s = g.group_l2_sum(v, vec![vec![0, 1, 2]]);
        let grad = g.backward(s).unwrap().get(v).unwrap().clone();
        let norm = col.sum_squares().sqrt();
        for (gv, cv) in grad.data().iter().zip(col.data()) {
            assert!((gv - cv / norm).abs() < 1e-12);
        }
        let r = grad_check(|g, p| g.group_l2_sum(p[0], vec![vec![0, 1, 2]]), &[col], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-7);
    }

    #[test]
    fn isolated_group_is_driven_to_zero() {
        let mut w: [f64; 2] = [0.6, -0.8];
        let (eta, beta) = (0.01f64, 0.3);
        let mut last = 1.0f64;
        for _ in 0..400 {
            let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
            if n == 0.0 {
                break;
            }
            // the final step lands exactly on zero instead of overshooting
            let step = (eta * beta).min(n);
            w.iter_mut().for_each(|x| *x -= step * *x / n);
            let now = (w[0] * w[0] + w[1] * w[1]).sqrt();
            assert!(now < last || now == 0.0);
            last = now;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn composite_objectives() {
        let mut g = Graph::<f64>::new();
        let lm = g.constant(Tensor::scalar(2.0));
        let s = g.constant(Tensor::scalar(0.5));
        let j = objective_g(&mut g, lm, s, 5.0);
        assert_eq!(g.value(j).item(), 4.5);
        let j = objective_g(&mut g, lm, s, 0.0);
        assert_eq!(g.value(j).item(), 2.0);
        let j = objective_l(&mut g, lm, s, 0.3);
        assert_eq!(g.value(j).item(), 2.15);
    }
}
