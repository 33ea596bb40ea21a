//! Central finite-difference gradient verification.
//!
//! The checker is deliberately independent of the backward implementation:
//! it only re-runs forward passes with perturbed parameters and compares the
//! quotient against the analytic gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::graph::{Graph, NodeId, ParamId};
use crate::numcore::nn::ParamStore;
use crate::numcore::tensor::Tensor;

/// Worst observed relative error per parameter tensor.
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Check analytic gradients of `build`'s scalar loss against central finite
/// differences at 64-bit.
///
/// `build` must construct the loss graph from the store alone so perturbed
/// re-evaluations see the modified parameters. Up to `coords_per_param`
/// coordinates of every parameter tensor are probed, chosen from a seeded
/// stream.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    build: F,
    coords_per_param: usize,
    epsilon: f64,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
{
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss).expect("loss must be scalar");
    let analytic: Vec<(ParamId, Tensor<f64>)> = g
        .param_nodes()
        .iter()
        .map(|&(pid, nid)| {
            let grad = g
                .grad(nid)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(nid).shape()));
            (pid, grad)
        })
        .collect();
    drop(g);

    let mut per_param = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (pid, grad) in &analytic {
        let numel = grad.numel();
        let mut worst: f64 = 0.0;
        let probes = coords_per_param.min(numel);
        for _ in 0..probes {
            let idx = rng.random_range(0..numel);
            let original = store.get(*pid).data()[idx];

            store.get_mut(*pid).data_mut()[idx] = original + epsilon;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let f_plus = gp.value(lp).data()[0];
            drop(gp);

            store.get_mut(*pid).data_mut()[idx] = original - epsilon;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let f_minus = gm.value(lm).data()[0];
            drop(gm);

            store.get_mut(*pid).data_mut()[idx] = original;

            let fd = (f_plus - f_minus) / (2.0 * epsilon);
            let an = grad.data()[idx];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            let err = (fd - an).abs() / scale;
            if err > worst {
                worst = err;
            }
        }
        per_param.push((store.name(*pid).to_string(), worst));
        if worst > max_rel_err {
            max_rel_err = worst;
        }
    }
    GradCheckReport {
        max_rel_err,
        per_param,
    }
}
