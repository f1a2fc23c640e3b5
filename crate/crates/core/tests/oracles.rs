mod common;

use proxforge::arch::{param_count, sample_arch, ArchConfig, AutoformerArch, SearchSpace};
use proxforge::metrics::pearson_r;
use proxforge::proxy::{mutate, random_graph, score_network, ProxyGraph, ProxyScore};
use proxforge::rng::rng_from_seed;
use proxforge::stats::{LayerStatistics, StatSlot};
use proxforge::tensor::{BinaryOp, Tensor, UnaryOp};

use common::{gaussian, random_bundle};

const DRAWS: usize = 10_000;

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn random_graph_nodes_are_uniform() {
    let mut rng = rng_from_seed(101);
    let mut slots = [0usize; 8];
    let mut unary = [0usize; 24];
    let mut binary = [0usize; 4];
    for _ in 0..DRAWS {
        let g = random_graph(&mut rng);
        slots[g.input_a as usize] += 1;
        unary[g.ops_a[0].index()] += 1;
        binary[BinaryOp::ALL.iter().position(|&b| b == g.combine).unwrap()] += 1;
    }
    for (i, &c) in slots.iter().enumerate() {
        assert!(within_3_sigma(c, DRAWS, 1.0 / 8.0), "slot {i}: {c}");
    }
    for (i, &c) in unary.iter().enumerate() {
        assert!(within_3_sigma(c, DRAWS, 1.0 / 24.0), "unary {i}: {c}");
    }
    for (i, &c) in binary.iter().enumerate() {
        assert!(within_3_sigma(c, DRAWS, 1.0 / 4.0), "binary {i}: {c}");
    }
}

// With p = 1 every node is resampled uniformly, so it keeps its value with
// probability 1 / |domain|.
#[test]
fn full_mutation_changes_nodes_at_the_expected_rate() {
    let mut rng = rng_from_seed(102);
    let parent = ProxyGraph::autoprox_a();
    let (mut slot, mut op, mut comb) = (0usize, 0usize, 0usize);
    for _ in 0..DRAWS {
        let c = mutate(&parent, &mut rng, 1.0);
        slot += (c.input_b != parent.input_b) as usize;
        op += (c.ops_b[1] != parent.ops_b[1]) as usize;
        comb += (c.combine != parent.combine) as usize;
    }
    assert!(within_3_sigma(slot, DRAWS, 7.0 / 8.0), "slot {slot}");
    assert!(within_3_sigma(op, DRAWS, 23.0 / 24.0), "op {op}");
    assert!(within_3_sigma(comb, DRAWS, 3.0 / 4.0), "combine {comb}");
}

fn constant_layer(m: (usize, usize), d: (usize, usize), k: f64) -> LayerStatistics {
    let zeros = |(r, c): (usize, usize)| Tensor::matrix(r, c, vec![0.0; r * c]).unwrap();
    let fill = |(r, c): (usize, usize)| Tensor::matrix(r, c, vec![k; r * c]).unwrap();
    LayerStatistics {
        msa_weights: vec![zeros(m)],
        msa_weight_grads: vec![zeros(m)],
        msa_act: zeros((2, 3)),
        msa_act_grad: zeros((2, 3)),
        mlp_weights: vec![fill(d)],
        mlp_weight_grads: vec![zeros(d)],
        mlp_act: zeros((2, 3)),
        mlp_act_grad: zeros((2, 3)),
    }
}

// sigmoid(0) = 1/2 on m entries has Frobenius norm sqrt(m)/2; log-softmax of a
// constant over d entries is -ln d everywhere.
#[test]
fn autoprox_p_closed_form_on_constant_inputs() {
    for (m, d, k) in [
        ((4, 6), (3, 5), 0.7),
        ((1, 1), (8, 2), -2.0),
        ((10, 30), (16, 64), 0.01),
    ] {
        let layer = constant_layer(m, d, k);
        let want = 0.5 * ((m.0 * m.1) as f64).sqrt() + ((d.0 * d.1) as f64).ln();
        let got = ProxyGraph::autoprox_p().evaluate_raw(&layer).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    }
}

fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn pearson_matches_two_pass_formula() {
    let mut rng = rng_from_seed(103);
    for _ in 0..200 {
        let x = gaussian(&mut rng, 50, 3.0);
        let noise = gaussian(&mut rng, 50, 1.0);
        let y: Vec<f64> = x
            .iter()
            .zip(&noise)
            .map(|(a, e)| 0.4 * a + e + 10.0)
            .collect();
        let got = pearson_r(&x, &y).unwrap();
        let want = two_pass_pearson(&x, &y);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

// Tensor shapes of the smallest tiny configuration at 224px / 1000 classes,
// listed one module at a time.
#[test]
fn param_count_of_smallest_tiny_config() {
    let (d, depth, heads, ratio) = (192usize, 12usize, 3usize, 3.5);
    let w = heads * 64;
    let h = (d as f64 * ratio) as usize;
    let mut shapes: Vec<Vec<usize>> =
        vec![vec![d, 3, 16, 16], vec![d], vec![1, 1, d], vec![1, 197, d]];
    for _ in 0..depth {
        shapes.extend([
            vec![d],
            vec![d],
            vec![3 * w, d],
            vec![3 * w],
            vec![d, w],
            vec![d],
            vec![d],
            vec![d],
            vec![h, d],
            vec![h],
            vec![d, h],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![1000, d], vec![1000]]);
    let want: u64 = shapes
        .iter()
        .map(|s| s.iter().product::<usize>() as u64)
        .sum();
    let cfg = ArchConfig::Autoformer(AutoformerArch {
        hidden_dim: d,
        depth,
        mlp_ratio: vec![ratio; depth],
        num_heads: vec![heads; depth],
        qkv_dim: 192,
    });
    cfg.validate().unwrap();
    assert_eq!(param_count(&cfg), want);
    assert_eq!(want, 5_273_896);
}

#[test]
fn tiny_space_has_configs_in_default_range() {
    let mut rng = rng_from_seed(104);
    let (lo, hi) = SearchSpace::Autoformer.default_param_range();
    let inside = (0..1000)
        .map(|_| param_count(&sample_arch(SearchSpace::Autoformer, &mut rng)))
        .filter(|p| (lo..=hi).contains(p))
        .count();
    assert!(inside > 0);
}

#[test]
fn autoprox_a_survives_json_round_trip() {
    let g = ProxyGraph::autoprox_a();
    let back = ProxyGraph::from_json(&g.to_json()).unwrap();
    assert_eq!(back, g);
    let mut rng = rng_from_seed(105);
    for _ in 0..20 {
        let net = random_bundle(&mut rng, false);
        let a = score_network(&g, &net);
        let b = score_network(&back, &net);
        assert_eq!(a, b);
        assert!(matches!(a, ProxyScore::Value(_)));
    }
}

#[test]
fn graph_node_domains_have_expected_sizes() {
    assert_eq!(StatSlot::ALL.len(), 8);
    assert_eq!(UnaryOp::ALL.len(), 24);
    assert_eq!(BinaryOp::ALL.len(), 4);
}
