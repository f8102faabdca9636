//! One within-domain round between two hand-built clients, checked against
//! scalar arithmetic written out by hand.

use std::f64::consts::E;

use fedbook_core::federation::{init_federation, run_round, FederationConfig, Scheme};
use fedbook_core::model::{ModelDims, OptimizerConfig, ParamSet, TrainConfig};
use fedbook_core::{ClientDataset, DomainTag, Labels, Tensor, TextAttributedGraph};

fn path_graph(n: usize) -> TextAttributedGraph {
    let edges = (1..n).map(|i| (i - 1, i)).collect();
    let feats = Tensor::matrix(n, 2, (0..2 * n).map(|k| 0.1 * k as f64 + 0.3).collect()).unwrap();
    TextAttributedGraph::new("path", edges, feats, None, Labels::Node(vec![0; n])).unwrap()
}

fn dataset(id: usize, n: usize) -> ClientDataset {
    ClientDataset {
        client_id: id,
        domain: DomainTag("d".into()),
        graphs: vec![path_graph(n)],
    }
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-10, "{a:?} vs {b:?}");
    }
}

#[test]
fn two_client_phase1_round_matches_hand_trace() {
    let dims = ModelDims {
        feature_dim: 2,
        edge_features: false,
        hidden_dim: 2,
        heads: 1,
        tokens: 2,
    };
    let lambda = 0.3;
    let config = FederationConfig {
        rounds_phase1: 1,
        rounds_phase2: 1,
        local_epochs: 1,
        scheme: Scheme::FedBook,
        lambda,
        optimizer: OptimizerConfig::adam(0.0),
        train: TrainConfig {
            mask_ratio: 0.0,
            ..TrainConfig::default()
        },
        seed: 4,
    };
    let (mut server, mut clients) = init_federation(vec![dataset(0, 4), dataset(1, 5)], &dims, &config).unwrap();

    // Zero weights make every node embed to the layer-2 bias, so client A
    // selects token 0 four times and client B selects token 1 five times.
    let setups = [
        ([1.0, 0.0, 0.0, 1.0], [1.0, 0.1], 0.5),
        ([0.6, 0.8, -1.0, 0.0], [-1.0, 0.0], -2.0),
    ];
    for (c, (tokens, bias, fill)) in clients.iter_mut().zip(setups) {
        let mut other = c.params.other_params();
        for t in other.0.iter_mut() {
            let k = t.numel();
            *t = Tensor::new(t.shape().to_vec(), (0..k).map(|i| fill + 0.01 * i as f64).collect()).unwrap();
        }
        c.params.set_other_params(&other).unwrap();
        for layer in c.params.encoder.layers.iter_mut() {
            layer.w_self = Tensor::zeros(&[2, 2]);
            layer.w_neighbor = Tensor::zeros(&[2, 2]);
        }
        c.params.encoder.layers[1].bias = Tensor::vector(bias.to_vec()).unwrap();
        c.params.set_tokens(Tensor::new(vec![1, 2, 2], tokens.to_vec()).unwrap()).unwrap();
    }
    let before: Vec<ParamSet> = clients.iter().map(|c| c.params.other_params()).collect();

    run_round(&mut server, &mut clients).unwrap();

    let (a0, a1) = ([1.0, 0.0], [0.0, 1.0]);
    let (b0, b1) = ([0.6, 0.8], [-1.0, 0.0]);
    let blend = |own: [f64; 2], terms: &[(f64, [f64; 2])]| -> [f64; 2] {
        let z: f64 = terms.iter().map(|(s, _)| s.exp()).sum();
        let mut mix = [0.0; 2];
        for (s, t) in terms {
            mix[0] += s.exp() * t[0] / z;
            mix[1] += s.exp() * t[1] / z;
        }
        [lambda * own[0] + (1.0 - lambda) * mix[0], lambda * own[1] + (1.0 - lambda) * mix[1]]
    };
    // Frequencies: A = (4, 0), B = (0, 5).
    // A token 0 (freq 4) may look at A0 (sim 1) and B1 (sim -1).
    let a0_new = blend(a0, &[(1.0, a0), (-1.0, b1)]);
    let tanh1 = (E - 1.0 / E) / (E + 1.0 / E);
    close(&a0_new, &[lambda + (1.0 - lambda) * tanh1, 0.0]);
    // A token 1 (freq 0) looks at everything.
    let a1_new = blend(a1, &[(0.0, a0), (1.0, a1), (0.8, b0), (0.0, b1)]);
    // B token 0 (freq 0) looks at everything.
    let b0_new = blend(b0, &[(0.6, a0), (0.8, a1), (1.0, b0), (-0.6, b1)]);
    // B token 1 (freq 5) only matches itself.
    let b1_new = blend(b1, &[(1.0, b1)]);
    close(&b1_new, &b1);

    close(clients[0].params.codebook.tokens.data(), &[a0_new, a1_new].concat());
    close(clients[1].params.codebook.tokens.data(), &[b0_new, b1_new].concat());

    // Client similarity: A→B = (0.6 + 0.8)/2 = 0.7, B→A = (0.8 + 0)/2 = 0.4.
    let weights = [
        [E / (E + 0.7f64.exp()), 0.7f64.exp() / (E + 0.7f64.exp())],
        [0.4f64.exp() / (E + 0.4f64.exp()), E / (E + 0.4f64.exp())],
    ];
    for (c, w) in clients.iter().zip(weights) {
        let got = c.params.other_params();
        for (slot, t) in got.0.iter().enumerate() {
            let expect: Vec<f64> = before[0].0[slot]
                .data()
                .iter()
                .zip(before[1].0[slot].data())
                .map(|(x, y)| w[0] * x + w[1] * y)
                .collect();
            close(t.data(), &expect);
        }
    }
    assert_eq!(server.round, 2);
}
