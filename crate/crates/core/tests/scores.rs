use ifso::autograd::{FdConfig, ScaledObjective};
use ifso::influence::{sensitivity_raw, sensitivity_scores, SolverChoice};
use ifso::ndtensor::SeededRng;
use ifso::net::{build_model, train, Batch, Dataset, GatedModel, ModelObjective, TrainConfig};
use ifso::oracle::{brute_force_scores, make_quadratic_testbed};

fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let s = if c == 0 { -1.0 } else { 1.0 };
        x.push(s + 0.8 * rng.standard_normal());
        x.push(-s + 0.8 * rng.standard_normal());
        y.push(c);
    }
    Dataset::new(ifso::Tensor64::new(vec![n, 2], x).unwrap(), y, 2).unwrap()
}

fn trained(arch: &str, seed: u64) -> (GatedModel, Dataset) {
    let data = blobs(48, seed);
    let mut model = build_model(arch, seed).unwrap();
    train(&mut model, &data, &TrainConfig { epochs: 15, seed, ..TrainConfig::default() }).unwrap();
    (model, data)
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn two_pass_scores_match_dense_matrices() {
    let fd = FdConfig::default();
    for (arch, seed) in [("mlp:2-10-6-2", 1), ("mlp:2-8-8-2", 2)] {
        let (model, data) = trained(arch, seed);
        let batch = data.full_batch();
        let obj = ModelObjective::new(&model, &batch);
        let (w, m) = (model.weights_flat(), model.gates_flat());
        for solver in [SolverChoice::Identity, SolverChoice::Exact] {
            let fast = sensitivity_raw(&obj, &w, &m, &solver, &fd).unwrap();
            let slow = brute_force_scores(&obj, &w, &m, &solver, &fd).unwrap();
            assert!(max_rel(&fast, &slow) <= 1e-3, "{arch} {solver:?}: {}", max_rel(&fast, &slow));
            assert_eq!(argsort(&fast), argsort(&slow), "{arch} {solver:?}");
        }
    }
}

#[test]
fn quadratic_scores_match_closed_form_for_both_solvers() {
    let fd = FdConfig::default();
    let bed = make_quadratic_testbed(3, 60, 7, 0.6).unwrap();
    let (w, _) = bed.optimum(&bed.gates).unwrap();
    let g = bed.mixed_matrix(&w, &bed.gates);
    let gbar = g.transpose() * nalgebra::DVector::from_element(7, 1.0);
    let h = bed.hessian(&bed.gates);
    let want_id: Vec<f64> = (&g * &gbar).iter().map(|x| x.abs()).collect();
    let want_ex: Vec<f64> = (&g * h.lu().solve(&gbar).unwrap()).iter().map(|x| x.abs()).collect();
    let got_id = sensitivity_raw(&bed, &w, &bed.gates, &SolverChoice::Identity, &fd).unwrap();
    let got_ex = sensitivity_raw(&bed, &w, &bed.gates, &SolverChoice::Exact, &fd).unwrap();
    assert!(max_rel(&got_id, &want_id) <= 1e-8);
    assert!(max_rel(&got_ex, &want_ex) <= 1e-6);
}

#[test]
fn ranking_survives_loss_scaling() {
    let fd = FdConfig::default();
    let bed = make_quadratic_testbed(4, 80, 8, 0.3).unwrap();
    let (w, _) = bed.optimum(&bed.gates).unwrap();
    for (solver, power) in [(SolverChoice::Identity, 2), (SolverChoice::Exact, 1)] {
        let base = sensitivity_raw(&bed, &w, &bed.gates, &solver, &fd).unwrap();
        for c in [0.1, 10.0] {
            let scaled = ScaledObjective { inner: &bed, factor: c };
            let s = sensitivity_raw(&scaled, &w, &bed.gates, &solver, &fd).unwrap();
            assert_eq!(argsort(&s), argsort(&base), "{solver:?} c={c}");
            let expect: Vec<f64> = base.iter().map(|x| x * c.powi(power)).collect();
            assert!(max_rel(&s, &expect) <= 1e-6, "{solver:?} c={c}");
        }
    }
}

#[test]
fn duplicated_channels_score_alike() {
    let (mut model, data) = trained("mlp:2-5-4-2", 5);
    // hidden unit 1 of the first layer becomes a copy of unit 0, incoming and outgoing
    {
        let p0 = model.params[0].as_mut().unwrap();
        let outs = 5;
        for r in 0..2 {
            let v = p0.weight.data()[r * outs];
            p0.weight.data_mut()[r * outs + 1] = v;
        }
        let b = p0.bias.data()[0];
        p0.bias.data_mut()[1] = b;
    }
    {
        let p2 = model.params[2].as_mut().unwrap();
        let row0: Vec<f64> = p2.weight.data()[0..4].to_vec();
        p2.weight.data_mut()[4..8].copy_from_slice(&row0);
    }
    let s = sensitivity_scores(&model, &[data.full_batch()], &SolverChoice::Identity, &FdConfig::default()).unwrap();
    let a = s.values[&ifso::net::ChannelId { layer: 0, channel: 0 }];
    let b = s.values[&ifso::net::ChannelId { layer: 0, channel: 1 }];
    assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-12), "{a} vs {b}");
}

#[test]
fn dead_channel_scores_zero() {
    let (mut model, data) = trained("mlp:2-6-4-2", 6);
    model.params[0].as_mut().unwrap().bias.data_mut()[3] = -1e3;
    let batch: Batch = data.full_batch();
    let obj = ModelObjective::new(&model, &batch);
    let s = sensitivity_raw(&obj, &model.weights_flat(), &model.gates_flat(), &SolverChoice::Identity, &FdConfig::default()).unwrap();
    assert_eq!(s[3], 0.0);
    assert!(s.iter().enumerate().any(|(j, &x)| j != 3 && x > 0.0));
}

#[test]
fn pruned_gates_are_left_out() {
    let (mut model, data) = trained("mlp:2-6-4-2", 7);
    model.set_gate(ifso::net::ChannelId { layer: 2, channel: 1 }, 0.0).unwrap();
    let s = sensitivity_scores(&model, &[data.full_batch()], &SolverChoice::Identity, &FdConfig::default()).unwrap();
    assert_eq!(s.values.len(), 9);
    assert!(!s.values.contains_key(&ifso::net::ChannelId { layer: 2, channel: 1 }));
}

#[test]
fn neumann_orders_differ_from_identity() {
    let (model, data) = trained("mlp:2-6-4-2", 8);
    let batch = data.full_batch();
    let obj = ModelObjective::new(&model, &batch);
    let (w, m) = (model.weights_flat(), model.gates_flat());
    let fd = FdConfig::default();
    let id = sensitivity_raw(&obj, &w, &m, &SolverChoice::Identity, &fd).unwrap();
    let n1 = sensitivity_raw(&obj, &w, &m, &SolverChoice::neumann(1), &fd).unwrap();
    let n2 = sensitivity_raw(&obj, &w, &m, &SolverChoice::neumann(2), &fd).unwrap();
    assert!(max_rel(&n1, &id) > 1e-6);
    assert!(max_rel(&n2, &n1) > 1e-9);
}
