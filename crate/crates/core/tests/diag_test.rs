use opcrash_core::geo::PointCloud;
use opcrash_core::model::{build, Backbone, ModelConfig, OutputMode};
use opcrash_core::numcore::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn diag() {
    let cfg = ModelConfig {
        backbone: Backbone::GeoTransolverFlare,
        tokens: 4, layers: 2, heads: 4, channels: 16,
        scales: vec![(0.15, 4), (0.4, 8)],
        context_anchors: 3, point_features: 1, globals_dim: 4, bc_dim: 3,
        output: OutputMode::Displacements { steps: 3 }, seed: 77,
    };
    let mut model = build::<f64>(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let cloud = PointCloud::new(
        Tensor::rand_uniform(&[12, 3], 0.0, 1.0, &mut r),
        Tensor::rand_uniform(&[12, 1], 0.5, 1.5, &mut r),
    ).unwrap();
    let prepared = model.prepare(&cloud, &[1.0, 0.9, 1.1, 1.0], &[-5.0, 1.2, 1.0]).unwrap();
    let mut wr = ChaCha8Rng::seed_from_u64(999);
    let weight = Tensor::<f64>::rand_uniform(&[12, 9], -1.0, 1.0, &mut wr);
    let loss_of = |model: &opcrash_core::model::ModelGraph<f64>| {
        let mut g = Graph::new();
        let ctx = model.project_context(&mut g, &prepared).unwrap().map(|b| b.tokens);
        let y = model.forward(&mut g, &prepared, ctx, None).unwrap();
        let w = g.leaf(weight.clone());
        let p = g.mul(y, w).unwrap();
        let loss = g.sum_all(p);
        (g.value(loss).data()[0], g, loss)
    };
    let (_, mut g, loss_node) = loss_of(&model);
    g.backward(loss_node).unwrap();
    let analytic: Vec<(usize, Tensor<f64>)> = g.param_nodes().iter()
        .map(|&(pid, nid)| (pid.0, g.grad(nid).cloned().unwrap_or_else(|| Tensor::zeros(g.value(nid).shape()))))
        .collect();
    drop(g);
    let eps = 1e-6;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(4242);
    for (pid, grad) in &analytic {
        let id = opcrash_core::ParamId(*pid);
        let numel = grad.numel();
        let mut worst = 0.0f64;
        for _ in 0..4.min(numel) {
            use rand::Rng;
            let idx = probe_rng.random_range(0..numel);
            let orig = model.store.get(id).data()[idx];
            model.store.get_mut(id).data_mut()[idx] = orig + eps;
            let (fp, _, _) = loss_of(&model);
            model.store.get_mut(id).data_mut()[idx] = orig - eps;
            let (fm, _, _) = loss_of(&model);
            model.store.get_mut(id).data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = grad.data()[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
        if worst > 1e-5 {
            println!("{}: worst {:e}", model.store.name(id), worst);
        }
    }
    panic!("done");
}
