//! Finite-difference suites over primitive ops, layers and the full model
//! loss, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, Var};
use crate::gradcheck::{finite_diff_check_many, finite_diff_check_params_where, GradReport};
use crate::losses::{
    diversity_loss, discriminability_loss, encoder_loss, total_loss, ClassifierHead, LossWeights,
};
use crate::model::{PatConfig, PatModel};
use crate::nn::{AttentionParams, FfnParams, LayerNormParams, transformer_sublayer, LAYER_NORM_EPS};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor};

/// Seed for the random inputs of every suite.
pub const SEED: u64 = 2024;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Initial finite-difference steps. The checker extrapolates away the
/// leading truncation term and steps around kinks, so the main concern is
/// roundoff on tiny gradient coordinates, which favours larger steps.
pub const OP_STEP: f64 = 1e-4;
pub const BLOCK_STEP: f64 = 1e-3;
pub const MODEL_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(format!("unknown scope {s:?}, expected op, block or model")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub coords: usize,
    /// Coordinates left out because they sit on a kink.
    pub skipped: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
}

impl UnitResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

type Loss<'a> = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a>;

struct Suite {
    rng: ChaCha8Rng,
    fault: Option<Fault>,
    results: Vec<UnitResult>,
    tolerance: f64,
    step: f64,
}

/// Deterministic, non-degenerate weights for reducing an op output to a scalar.
fn probe(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 7919 + 13) % 23) as f64 / 23.0 - 0.45)
}

fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = g.constant(probe(g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

impl Suite {
    fn new(tolerance: f64, step: f64, fault: Option<Fault>) -> Self {
        Suite {
            rng: ChaCha8Rng::seed_from_u64(SEED),
            fault,
            results: Vec::new(),
            tolerance,
            step,
        }
    }

    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-1.0..1.0))
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let v: f64 = self.rng.gen_range(0.1..1.0);
            if self.rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    fn record(&mut self, name: &str, reports: &[GradReport]) {
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one report");
        self.results.push(UnitResult {
            name: name.to_string(),
            worst: worst.max_rel_error,
            tolerance: self.tolerance,
            coords: reports.iter().map(|r| r.coords_checked).sum(),
            skipped: reports.iter().map(|r| r.coords_skipped).sum(),
            analytic: worst.analytic,
            numeric: worst.numeric,
        });
    }

    fn inputs(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: Loss<'_>) -> Result<()> {
        let fault = self.fault;
        let r = finite_diff_check_many(
            |g, v| {
                if let Some(fl) = fault {
                    g.inject_fault(fl);
                }
                f(g, v)
            },
            &inputs,
            self.step,
        )?;
        self.record(name, &[r]);
        Ok(())
    }

    /// Checks the gradient with respect to `inputs` and to the store entries
    /// selected by `keep`.
    fn block<K: Fn(&str) -> bool>(
        &mut self,
        name: &str,
        store: &ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        keep: K,
        f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let fault = self.fault;
        let wrap = |g: &mut Graph<f64>| {
            if let Some(fl) = fault {
                g.inject_fault(fl);
            }
        };
        let by_input = finite_diff_check_many(
            |g, v| {
                wrap(g);
                f(g, store, v)
            },
            &inputs,
            self.step,
        )?;
        let by_param = finite_diff_check_params_where(
            |g, s| {
                wrap(g);
                let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                f(g, s, &v)
            },
            store,
            self.step,
            1,
            keep,
        )?;
        self.record(name, &[by_input, by_param]);
        Ok(())
    }
}

fn op_suite(fault: Option<Fault>) -> Result<Vec<UnitResult>> {
    let mut s = Suite::new(OP_TOLERANCE, OP_STEP, fault);
    macro_rules! unit {
        ($name:expr, [$($shape:expr),*], $f:expr) => {{
            let inputs = vec![$(s.uniform(&$shape)),*];
            s.inputs($name, inputs, Box::new($f))?;
        }};
    }
    unit!("matmul", [[3, 4], [4, 5]], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
    unit!("matmul_batched_lhs", [[2, 3, 4], [4, 5]], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
    unit!("bmm", [[2, 3, 4], [2, 4, 5]], |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        project(g, y)
    });
    unit!("bmm_trans_b", [[2, 3, 4], [2, 5, 4]], |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        project(g, y)
    });
    unit!("add", [[3, 4], [3, 4]], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y)
    });
    unit!("sub", [[3, 4], [3, 4]], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y)
    });
    unit!("mul", [[3, 4], [3, 4]], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y)
    });
    unit!("add_broadcast", [[2, 3, 4], [3, 4]], |g, v| {
        let y = g.add_broadcast(v[0], v[1])?;
        project(g, y)
    });
    unit!("repeat", [[3, 4]], |g, v| {
        let y = g.repeat(v[0], 3)?;
        project(g, y)
    });
    unit!("mul_scalar", [[3, 4]], |g, v| {
        let y = g.mul_scalar(v[0], -1.7);
        project(g, y)
    });
    unit!("sum", [[3, 4]], |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    });
    unit!("mean", [[3, 4]], |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    });
    unit!("sum_axis", [[2, 3, 4]], |g, v| {
        let y = g.sum_axis(v[0], 1)?;
        project(g, y)
    });
    unit!("mean_axis", [[2, 3, 4]], |g, v| {
        let y = g.mean_axis(v[0], 0)?;
        project(g, y)
    });
    unit!("concat", [[2, 3, 2], [2, 1, 2]], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y)
    });
    unit!("narrow", [[2, 5, 3]], |g, v| {
        let y = g.narrow(v[0], 1, 1, 3)?;
        project(g, y)
    });
    unit!("reshape_permute", [[2, 3, 4]], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        let y = g.reshape(y, &[4, 6])?;
        project(g, y)
    });
    unit!("softmax_rows", [[3, 5]], |g, v| {
        let y = g.softmax_rows(v[0])?;
        project(g, y)
    });
    unit!("layer_norm", [[4, 6], [6], [6]], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        project(g, y)
    });
    unit!("batch_norm", [[5, 4], [4], [4]], |g, v| {
        let (y, _, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y)
    });
    unit!("l2_normalize", [[3, 4]], |g, v| {
        let y = g.l2_normalize(v[0])?;
        project(g, y)
    });
    unit!("cosine_similarity", [[3, 4], [3, 4]], |g, v| {
        let y = g.cosine_similarity(v[0], v[1])?;
        project(g, y)
    });
    unit!("conv2d", [[1, 5, 4, 2], [3, 3, 2, 3], [3]], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        project(g, y)
    });
    unit!("conv2d_stride2", [[2, 6, 5, 2], [3, 3, 2, 3]], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, 1)?;
        project(g, y)
    });
    unit!("cross_entropy", [[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 3, 1, 4]));
    // a wide margin keeps every hinge active
    unit!("triplet_batch_hard", [[6, 3]], |g, v| g.triplet_batch_hard(v[0], &[0, 0, 1, 1, 2, 2], 5.0));

    let x = s.away_from_zero(&[3, 4]);
    s.inputs(
        "relu",
        vec![x],
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y)
        }),
    )?;
    Ok(s.results)
}

fn block_config() -> PatConfig {
    PatConfig {
        image_height: 16,
        image_width: 8,
        stem_channels: vec![4, 8],
        stem_strides: vec![2, 2],
        d_model: 8,
        heads: 2,
        d_ff: 12,
        enc_layers: 1,
        dec_layers: 1,
        prototypes: 2,
        positional_embedding: true,
        use_encoder: true,
        use_decoder: true,
    }
}

fn block_suite(fault: Option<Fault>) -> Result<Vec<UnitResult>> {
    let mut s = Suite::new(BLOCK_TOLERANCE, BLOCK_STEP, fault);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::new(&mut store, "attn", 8, 2, 4, 4, &mut rng);
    let ffn = FfnParams::new(&mut store, "ffn", 8, 12, &mut rng);
    let norm = LayerNormParams::new(&mut store, "norm", 8);
    let head = ClassifierHead::new(&mut store, "head", 8, 3, &mut rng);
    let parts: Vec<ClassifierHead> = (0..2).map(|i| ClassifierHead::new(&mut store, &format!("part{i}"), 8, 3, &mut rng)).collect();
    // layer norm parameters start at 1 and 0; move them off the trivial point
    for id in [norm.gamma, norm.beta] {
        let t = s.uniform(&[8]);
        *store.get_mut(id) = t;
    }
    let labels = [0, 0, 1, 1, 2, 2];
    let weights = LossWeights {
        margin_alpha: 5.0,
        ..LossWeights::default()
    };

    let x = s.uniform(&[2, 5, 8]);
    s.block("self_attention", &store, vec![x], |n| n.starts_with("attn"), |g, st, v| {
        let a = attn.forward(g, st, v[0], v[0], v[0])?;
        let o = project(g, a.output)?;
        let w = project(g, a.weights)?;
        g.add(o, w)
    })?;
    let (q, kv) = (s.uniform(&[2, 3, 8]), s.uniform(&[2, 5, 8]));
    s.block("cross_attention", &store, vec![q, kv], |n| n.starts_with("attn"), |g, st, v| {
        let a = attn.forward(g, st, v[0], v[1], v[1])?;
        project(g, a.output)
    })?;
    let x = s.uniform(&[2, 5, 8]);
    s.block("ffn", &store, vec![x], |n| n.starts_with("ffn"), |g, st, v| {
        let y = ffn.forward(g, st, v[0])?;
        project(g, y)
    })?;
    let x = s.uniform(&[2, 5, 8]);
    s.block("transformer_sublayer", &store, vec![x], |n| n.starts_with("attn") || n.starts_with("norm"), |g, st, v| {
        let a = attn.forward(g, st, v[0], v[0], v[0])?;
        let y = transformer_sublayer(g, st, &norm, v[0], a.output)?;
        project(g, y)
    })?;
    let x = s.uniform(&[6, 8]);
    s.block("classifier_head", &store, vec![x], |n| n.starts_with("head"), |g, st, v| {
        let logits = head.logits(g, st, v[0])?;
        g.cross_entropy(logits, &labels)
    })?;
    let x = s.uniform(&[6, 8]);
    s.block("encoder_loss", &store, vec![x], |n| n.starts_with("head"), |g, st, v| {
        encoder_loss(g, st, v[0], &labels, &head, &weights)
    })?;
    let x = s.uniform(&[6, 2, 8]);
    s.block("discriminability_loss", &store, vec![x], |n| n.starts_with("part"), |g, st, v| {
        discriminability_loss(g, st, v[0], &labels, &parts, &weights)
    })?;
    let x = s.uniform(&[2, 3, 5]);
    s.block("diversity_loss", &store, vec![x], |_| false, |g, _, v| diversity_loss(g, v[0]))?;

    // stages of a small model
    let model = PatModel::<f64>::new(block_config(), 3, 11)?;
    let img = s.uniform(&[2, 16, 8, 3]);
    s.block("stem", &model.store, vec![img], |n| n.starts_with("stem"), |g, st, v| {
        let m = PatModel { store: st.clone(), ..model.clone() };
        let y = m.stem_forward(g, v[0])?;
        project(g, y)
    })?;
    let fmap = s.uniform(&[2, 4, 2, 8]);
    s.block("encoder_block", &model.store, vec![fmap], |n| n.starts_with("encoder"), |g, st, v| {
        let m = PatModel { store: st.clone(), ..model.clone() };
        let y = m.encoder_forward(g, v[0])?;
        project(g, y)
    })?;
    let f_att = s.uniform(&[2, 8, 8]);
    s.block("decoder_block", &model.store, vec![f_att], |n| n.starts_with("decoder"), |g, st, v| {
        let m = PatModel { store: st.clone(), ..model.clone() };
        let (parts, masks) = m.decoder_forward(g, v[0])?;
        let a = project(g, parts)?;
        let b = project(g, masks)?;
        g.add(a, b)
    })?;
    Ok(s.results)
}

/// Desk-scale model: 16x8 images, d = 16, K = 3 prototypes, 2 heads.
pub fn model_check_config() -> PatConfig {
    PatConfig {
        image_height: 16,
        image_width: 8,
        stem_channels: vec![4, 8],
        stem_strides: vec![2, 2],
        d_model: 16,
        heads: 2,
        d_ff: 32,
        enc_layers: 1,
        dec_layers: 1,
        prototypes: 3,
        positional_embedding: true,
        use_encoder: true,
        use_decoder: true,
    }
}

fn model_suite(fault: Option<Fault>) -> Result<Vec<UnitResult>> {
    let mut s = Suite::new(MODEL_TOLERANCE, MODEL_STEP, fault);
    let model = PatModel::<f64>::new(model_check_config(), 3, 5)?;
    let images = s.uniform(&[6, 16, 8, 3]).data().iter().map(|v| 0.5 + 0.5 * v).collect::<Vec<_>>();
    let images = Tensor::new(&[6, 16, 8, 3], images)?;
    let labels = [0, 0, 1, 1, 2, 2];
    let weights = LossWeights::default();
    s.block("total_loss", &model.store, vec![], |_| true, |g, st, _| {
        let m = PatModel { store: st.clone(), ..model.clone() };
        let x = g.constant(images.clone());
        let fv = m.forward_graph(g, x)?;
        Ok(total_loss(g, st, &fv, &labels, &m.heads, &weights, true)?.total)
    })?;
    Ok(s.results)
}

/// Runs one suite. `fault` corrupts the backward pass for sensitivity tests.
pub fn run(scope: Scope, fault: Option<Fault>) -> Result<Vec<UnitResult>> {
    match scope {
        Scope::Op => op_suite(fault),
        Scope::Block => block_suite(fault),
        Scope::Model => model_suite(fault),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_and_catches_matmul_fault() {
        let clean = run(Scope::Op, None).unwrap();
        assert!(clean.iter().all(UnitResult::passed), "{clean:#?}");
        let broken = run(Scope::Op, Some(Fault::MatmulBackward)).unwrap();
        let failed: Vec<&str> = broken.iter().filter(|u| !u.passed()).map(|u| u.name.as_str()).collect();
        assert!(failed.contains(&"matmul"), "{failed:?}");
    }

    #[test]
    fn block_suite_passes_and_catches_matmul_fault() {
        let clean = run(Scope::Block, None).unwrap();
        assert!(clean.iter().all(UnitResult::passed), "{clean:#?}");
        let broken = run(Scope::Block, Some(Fault::MatmulBackward)).unwrap();
        let failed = broken.iter().filter(|u| !u.passed()).count();
        assert!(failed >= 5, "{broken:#?}");
    }

    #[test]
    fn scope_names() {
        assert_eq!("model".parse::<Scope>(), Ok(Scope::Model));
        assert!("all".parse::<Scope>().is_err());
    }
}
