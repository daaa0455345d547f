use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::entity_graph::degrees_from_edges;
use crate::latent_codec::LatentGraph;
use crate::mask_split::split_graph;

fn random_graph(n: usize, d: usize, seed: u64) -> LatentGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edge_index: Vec<(u32, u32)> = (1..n as u32).map(|j| (rng.random_range(0..j), j)).collect();
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n as u32), rng.random_range(0..n as u32));
        if a != b {
            edge_index.push((a.min(b), a.max(b)));
        }
    }
    edge_index.sort_unstable();
    edge_index.dedup();
    let ne = edge_index.len();
    LatentGraph {
        side: 1,
        channels: d,
        vertex_latents: (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        edge_latents: (0..ne * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        degrees: degrees_from_edges(&edge_index, n),
        edge_index,
    }
}

fn config(d: usize, strategy: Strategy) -> BackboneConfig {
    BackboneConfig {
        width: d,
        layers: 2,
        heads: 2,
        strategy,
        ..BackboneConfig::default()
    }
}

fn noisy_like(g: &SubGraph, seed: u64) -> GraphLatents {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |x: &Tensor| Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect(),
    };
    GraphLatents::new(t(&g.vertices), t(&g.edges)).unwrap()
}

#[test]
fn six_strategies_produce_finite_outputs() {
    let g = random_graph(12, 8, 1);
    let (ge, gd, _) = split_graph(&g, 0.5, 3).unwrap();
    let noisy = noisy_like(&gd, 4);
    for s in Strategy::ALL {
        let b = Backbone::new(config(8, s), 5).unwrap();
        let out = b.denoise(&ge, &gd, &noisy, 10).unwrap();
        assert_eq!(out.vertices.shape, gd.vertices.shape, "{s}");
        assert_eq!(out.edges.shape, gd.edges.shape, "{s}");
        assert!(out.vertices.all_finite() && out.edges.all_finite(), "{s}");
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, format!("\"{}\"", s.name()));
    }
    assert!(matches!("NtoX".parse::<Strategy>(), Err(Error::Config(_))));
}

#[test]
fn time_reaches_the_output() {
    let g = random_graph(10, 8, 2);
    let (ge, gd, _) = split_graph(&g, 0.5, 1).unwrap();
    let noisy = noisy_like(&gd, 3);
    let b = Backbone::new(config(8, Strategy::NtoNEtoE), 0).unwrap();
    let a = b.denoise(&ge, &gd, &noisy, 1).unwrap();
    let z = b.denoise(&ge, &gd, &noisy, 1000).unwrap();
    assert_ne!(a.vertices, z.vertices);
}

#[test]
fn encoder_keeps_cardinalities() {
    let g = random_graph(9, 8, 3);
    let (ge, _, _) = split_graph(&g, 0.4, 2).unwrap();
    let b = Backbone::new(BackboneConfig { width: 8, heads: 2, ..BackboneConfig::default() }, 0).unwrap();
    let states = b.encode(&ge).unwrap();
    assert_eq!(states.len(), 4);
    for s in &states {
        assert_eq!(s.vertices.shape, ge.vertices.shape);
        assert_eq!(s.edges.shape, ge.edges.shape);
    }
}

#[test]
fn single_vertex_encoder_is_pointwise() {
    let g = SubGraph {
        vertices: Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap(),
        edges: Tensor::zeros(&[0, 4]),
        vertex_ids: vec![0],
        edge_ids: vec![],
        edge_endpoints: vec![],
        adjacency: vec![],
        degrees: vec![0],
    };
    let b = Backbone::new(config(4, Strategy::NtoN), 9).unwrap();
    let states = b.encode(&g).unwrap();
    let w = b.params().get(b.params().id("enc0.w_v").unwrap());
    let expected = gcn_layer(&g.vertices, &crate::nn::Csr::identity(1), w, Activation::Gelu).unwrap();
    assert_eq!(states[0].vertices, expected);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let g = random_graph(8, 4, 4);
    let (ge, _, _) = split_graph(&g, 0.3, 0).unwrap();
    let n = ge.num_vertices();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut inv = vec![0; n];
    perm.iter().enumerate().for_each(|(new, &old)| inv[old] = new);
    let mut pg = ge.clone();
    pg.vertices = Tensor::from_rows(&perm.iter().map(|&o| ge.vertices.row(o).to_vec()).collect::<Vec<_>>(), 4).unwrap();
    pg.adjacency = ge
        .adjacency
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (inv[i as usize] as u32, inv[j as usize] as u32);
            (a.min(b), a.max(b))
        })
        .collect();
    let b = Backbone::new(config(4, Strategy::NtoN), 2).unwrap();
    let s0 = b.encode(&ge).unwrap();
    let s1 = b.encode(&pg).unwrap();
    for (x, y) in s0.iter().zip(&s1) {
        for (new, &old) in perm.iter().enumerate() {
            for (p, q) in y.vertices.row(new).iter().zip(x.vertices.row(old)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert_eq!(x.edges, y.edges);
    }
}

#[test]
fn wrong_condition_count_and_missing_stream() {
    let g = random_graph(8, 4, 5);
    let (ge, gd, _) = split_graph(&g, 0.5, 0).unwrap();
    let b = Backbone::new(config(4, Strategy::NtoN), 0).unwrap();
    let vis = BatchSide::new(&[&ge], true).unwrap();
    let tgt = BatchSide::new(&[&gd], true).unwrap();
    let mut tape = Tape::new();
    let p = b.params().bind(&mut tape, false);
    let conds = b.encoder_forward(&mut tape, &p, &vis).unwrap();
    let nv = tape.constant(gd.vertices.clone());
    let ne = tape.constant(gd.edges.clone());
    let r = b.decoder_forward(&mut tape, &p, nv, ne, &[3], &tgt, &vis, &conds[..1]);
    assert!(matches!(r, Err(Error::Config(_))));

    let mut bare = ge.clone();
    bare.edges = Tensor::zeros(&[0, 4]);
    bare.edge_ids.clear();
    bare.edge_endpoints.clear();
    let noisy = noisy_like(&gd, 0);
    let e = Backbone::new(config(4, Strategy::EtoE), 0).unwrap();
    match e.denoise(&bare, &gd, &noisy, 5) {
        Err(Error::Config(msg)) => assert!(msg.contains("edges"), "{msg}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

fn decoder_loss(b: &Backbone, ge: &SubGraph, gd: &SubGraph, noisy: &GraphLatents, grad_of: Option<ParamId>) -> (f64, f64) {
    let vis = BatchSide::new(&[ge], true).unwrap();
    let tgt = BatchSide::new(&[gd], true).unwrap();
    let mut tape = Tape::new();
    let p = b.params().bind(&mut tape, true);
    let conds = b.encoder_forward(&mut tape, &p, &vis).unwrap();
    let nv = tape.constant(noisy.vertices.clone());
    let ne = tape.constant(noisy.edges.clone());
    let out = b.decoder_forward(&mut tape, &p, nv, ne, &[7], &tgt, &vis, &conds).unwrap();
    let cv = tape.constant(gd.vertices.clone());
    let ce = tape.constant(gd.edges.clone());
    let lv = tape.mse(out.vertices, cv);
    let le = tape.mse(out.edges, ce);
    let loss = tape.add(lv, le);
    let value = tape.value(loss).item();
    let g = grad_of.map_or(0.0, |id| {
        let grads = tape.backward(loss);
        grads.get(p[id]).map_or(0.0, |t| t.data[1])
    });
    (value, g)
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let g = random_graph(10, 4, 6);
    let (ge, gd, _) = split_graph(&g, 0.5, 2).unwrap();
    let noisy = noisy_like(&gd, 1);
    for s in [Strategy::NtoNEtoE, Strategy::NtoEEtoN] {
        let mut b = Backbone::new(config(4, s), 3).unwrap();
        // skip weights start at zero; give them a value so every path is live
        for id in b.params().ids().collect::<Vec<_>>() {
            if b.params().name(id).ends_with(".skip") {
                b.params_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let probes: Vec<ParamId> = ["enc0.w_v", "enc1.w_e", "dec0.conv_v", "dec1.ff_e.w1", "out_v.skip"]
            .iter()
            .map(|n| b.params().id(n).unwrap())
            .chain(b.params().ids().filter(|&id| b.params().name(id).contains(".ca_")).take(2))
            .collect();
        for id in probes {
            let (_, analytic) = decoder_loss(&b, &ge, &gd, &noisy, Some(id));
            let h = 1e-6;
            b.params_mut().get_mut(id).data[1] += h;
            let (up, _) = decoder_loss(&b, &ge, &gd, &noisy, None);
            b.params_mut().get_mut(id).data[1] -= 2.0 * h;
            let (down, _) = decoder_loss(&b, &ge, &gd, &noisy, None);
            b.params_mut().get_mut(id).data[1] += h;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{s} {}: analytic {analytic}, numeric {numeric}", b.params().name(id));
        }
    }
}

#[test]
fn forward_is_deterministic_and_checkpoint_round_trips() {
    let g = random_graph(10, 8, 7);
    let (ge, gd, _) = split_graph(&g, 0.6, 11).unwrap();
    let noisy = noisy_like(&gd, 2);
    let b = Backbone::new(config(8, Strategy::NtoEEtoN), 4).unwrap();
    let a = b.denoise(&ge, &gd, &noisy, 30).unwrap();
    assert_eq!(a, b.denoise(&ge, &gd, &noisy, 30).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.json");
    b.save(&path).unwrap();
    let back = Backbone::load(&path).unwrap();
    assert_eq!(back.config(), b.config());
    assert_eq!(back.denoise(&ge, &gd, &noisy, 30).unwrap(), a);
}

#[test]
fn rejects_bad_configs() {
    assert!(Backbone::new(BackboneConfig { width: 6, heads: 4, ..BackboneConfig::default() }, 0).is_err());
    assert!(Backbone::new(BackboneConfig { width: 7, heads: 7, ..BackboneConfig::default() }, 0).is_err());
}
