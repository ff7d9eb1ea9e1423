use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Builds `loss(graph, vars)` over the tensors of `ps`, then FD-checks all of them.
fn fd_check(ps: ParamSet, probes: usize, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut ps = ps;
    let mut g = Graph::new();
    let vars = g.bind(&ps, Some(0));
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads, 0, ps.len());
    let report = gradcheck::check(&mut ps, &pg, probes, &mut rng(), |p| {
        let mut g = Graph::new();
        let vars = g.bind(p, None);
        let l = build(&mut g, &vars);
        g.value(l).item()
    });
    assert!(report.passed(1e-3), "max rel err {} in {:?}", report.max_rel_err(), report.probes);
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, 1.0, r)
}

#[test]
fn conv_relu_pool_linear_gradients() {
    let mut r = rng();
    let mut ps = ParamSet::new();
    ps.push("x", random(&[2, 3, 7, 6], &mut r));
    ps.push_conv("c1", 3, 4, 3, &mut r);
    ps.push_conv("c2", 4, 5, 3, &mut r);
    ps.push_linear("fc", 5, 3, 0.5, &mut r);
    fd_check(ps, 40, |g, v| {
        let h = g.conv2d(v[0], v[1], v[2], 2, 1);
        let h = g.relu(h);
        let h = g.conv2d(h, v[3], v[4], 1, 1);
        let h = g.global_avg_pool(h);
        let y = g.linear(h, v[5], v[6]);
        g.softmax_ce(y, &[0, 1], &[2, 0], &[0.5, 1.5])
    });
}

#[test]
fn roi_pool_pairs_and_losses_gradients() {
    let mut r = rng();
    let mut ps = ParamSet::new();
    ps.push("fm", random(&[1, 2, 5, 5], &mut r));
    ps.push("other", random(&[3, 2, 2, 2], &mut r));
    ps.push_linear("fc", 16, 2, 0.3, &mut r);
    let rois = [
        CellRange { r0: 0, r1: 5, c0: 0, c1: 5 },
        CellRange { r0: 1, r1: 2, c0: 3, c1: 4 },
        CellRange { r0: 2, r1: 5, c0: 1, c1: 3 },
    ];
    fd_check(ps, 40, |g, v| {
        let pooled = g.roi_pool(v[0], &rois, 2, 2);
        let both = g.concat_rows(&[pooled, v[1]]);
        let sel = g.select_rows(both, &[0, 4, 2]);
        let pairs = g.pair_concat(sel, v[1], &[(0, 1), (2, 2), (1, 0)]);
        let logits = g.linear(pairs, v[2], v[3]);
        let a = g.sigmoid_bce(logits, &[0, 3, 5], &[1.0, 0.0, 1.0], &[0.3, 0.3, 0.4]);
        let b = g.smooth_l1(logits, &[1, 2, 4], &[0.2, -0.1, 3.0], &[1.0, 1.0, 0.5], 1.0 / 9.0);
        g.weighted_sum(&[(a, 1.0), (b, 2.0)])
    });
}

#[test]
fn masked_sq_diff_gradient_closed_form() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let reference = [0.0, 0.0, 1.0, 1.0];
    let mask = [true, false, true, false];
    let l = g.masked_sq_diff(x, &reference, &mask, 2.0);
    assert!((g.value(l).item() - (1.0 + 4.0) / 2.0).abs() < 1e-12);
    let gr = g.backward(l);
    assert_eq!(gr.get(x).unwrap().data, vec![1.0, 0.0, 2.0, 0.0]);
}

#[test]
fn roi_pool_identity_partition_and_replication() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let whole = CellRange { r0: 0, r1: 2, c0: 0, c1: 2 };
    let y = g.roi_pool(x, &[whole], 2, 2);
    assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
    let y = g.roi_pool(x, &[whole], 1, 1);
    assert_eq!(g.value(y).data, vec![4.0]);
    let single = CellRange { r0: 1, r1: 2, c0: 0, c1: 1 };
    let y = g.roi_pool(x, &[single], 3, 3);
    assert_eq!(g.value(y).data, vec![3.0; 9]);
}

#[test]
fn conv_output_size_halves_with_ceil() {
    let mut r = rng();
    let mut ps = ParamSet::new();
    ps.push_conv("c", 1, 1, 3, &mut r);
    let mut g = Graph::new();
    let v = g.bind(&ps, None);
    for (h, expect) in [(96, 48), (7, 4), (1, 1)] {
        let x = g.constant(Tensor::zeros(&[1, 1, h, h]));
        let y = g.conv2d(x, v[0], v[1], 2, 1);
        assert_eq!(g.shape(y), &[1, 1, expect, expect]);
    }
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(2.0));
    let b = g.variable(Tensor::scalar(3.0));
    let s = g.weighted_sum(&[(a, 1.0), (b, 4.0)]);
    let gr = g.backward(s);
    assert!(gr.get(a).is_none());
    assert_eq!(gr.get(b).unwrap().data, vec![4.0]);
}
