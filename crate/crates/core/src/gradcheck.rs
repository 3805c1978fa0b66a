//! Central finite differences against taped gradients, in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::lm::PromptSequence;
use crate::model::{module_rng, SpeechTranslator};
use crate::tensor::Tensor;

/// Relative errors are `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.
/// The floor keeps gradients that are zero up to rounding from reporting
/// spurious relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `backward` gradients of the scalar built by `f` with central
/// differences `(f(θ+h·e) − f(θ−h·e)) / 2h`, element by element, over every
/// trainable parameter (or the first `max_per_param` elements of each).
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.value(v).item())
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        let n = max_per_param.map_or(analytic.len(), |m| m.min(analytic.len()));
        for k in 0..n {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |g, p| g.add(p[0], p[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, p| g.sub(p[0], p[1])),
        ("mul", vec![vec![3, 4], vec![3, 1]], |g, p| g.mul(p[0], p[1])),
        ("scale", vec![vec![3, 4]], |g, p| Ok(g.scale(p[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, p| g.matmul(p[0], p[1])),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |g, p| g.matmul_t(p[0], p[1])),
        ("transpose", vec![vec![3, 4]], |g, p| g.transpose(p[0])),
        ("gelu", vec![vec![3, 4]], |g, p| Ok(g.gelu(p[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, p| {
            g.layer_norm(p[0], p[1], p[2])
        }),
        ("softmax_rows", vec![vec![3, 4]], |g, p| g.softmax(p[0], 1)),
        ("softmax_cols", vec![vec![3, 4]], |g, p| g.softmax(p[0], 0)),
        ("embedding", vec![vec![5, 3]], |g, p| g.embedding(p[0], &[4, 0, 4, 2])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, p| {
            g.concat_rows(&[p[0], p[1]])
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, p| {
            g.concat_cols(&[p[0], p[1]])
        }),
        ("slice_rows", vec![vec![4, 3]], |g, p| g.slice_rows(p[0], 1, 3)),
        ("slice_cols", vec![vec![3, 4]], |g, p| g.slice_cols(p[0], 1, 3)),
        ("sum", vec![vec![3, 4]], |g, p| Ok(g.sum(p[0]))),
        ("stack_frames", vec![vec![5, 2]], |g, p| g.stack_frames(p[0], 2)),
        ("masked_cross_entropy", vec![vec![4, 5]], |g, p| {
            g.masked_cross_entropy(p[0], &[1, 0, 4, 2], &[true, false, true, true])
        }),
        ("masked_nll", vec![vec![3, 5]], |g, p| {
            g.masked_nll(p[0], &[3, 3, 0], &[true, true, false], 5.0)
        }),
    ]
}

/// Runs [`finite_difference_check`] on every differentiable graph op, each
/// reduced to a scalar through a random weighting of its output.
pub fn check_ops(h: f64, seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut out = Vec::new();
    for (name, shapes, op) in op_cases() {
        let mut rng = module_rng(seed, name);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("{name}.{i}"), random(&mut rng, s)))
            .collect::<Result<Vec<_>>>()?;
        let probe_rng = rng.clone();
        let report = finite_difference_check(&mut store, h, None, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = op(g, &vars)?;
            let shape = g.shape(y).to_vec();
            let w = g.constant(random(&mut probe_rng.clone(), &shape));
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        })?;
        out.push((name, report));
    }
    Ok(out)
}

/// Checks the masked loss of one sequence through encoder, adaptor, LM and
/// any adapters, with the input features held fixed.
pub fn check_pipeline(
    model: &mut SpeechTranslator<f64>,
    prompt: &PromptSequence,
    features: &Tensor<f64>,
    h: f64,
    max_per_param: Option<usize>,
) -> Result<FdReport> {
    let denom = prompt.masked_count() as f64;
    let mut store = std::mem::take(&mut model.store);
    let view = &*model;
    let r = finite_difference_check(&mut store, h, max_per_param, |g, s| {
        let logits = view.logits_with(s, g, prompt, features)?;
        g.masked_nll(logits, &prompt.dense_targets(), &prompt.loss_mask, denom)
    });
    model.store = store;
    r
}
