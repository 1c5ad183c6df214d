
use super::blocks::{AttnP, Fwd, ResnetP, SpatialP, TemporalP};
use super::weights::ParamBuilder;
use super::*;
use crate::ConditionChannel;

fn tiny_config() -> NetConfig {
    NetConfig {
        dim: 8,
        stack: 4,
        widths: vec![8],
        levels: 1,
        heads: 2,
        cond_dim: 8,
        emb_dim: 8,
        ..NetConfig::default()
    }
}

fn random_net(cfg: NetConfig, seed: u64) -> (UNet<f64>, NetWeights<f64>) {
    let mut rng = Rng::new(seed, 0);
    let (net, mut w) = UNet::new(cfg, &mut rng).unwrap();
    // exercise every path, including zero-initialised output layers
    w.randomize(&mut rng, 0.3);
    (net, w)
}

fn bundle(rng: &mut Rng, frames: usize) -> ConditionBundle<f64> {
    ConditionBundle::new(
        (0..frames).map(|_| rng.uniform() * 4.0).collect(),
        rng.uniform(),
        rng.uniform() * 2.0 - 1.0,
    )
}

struct Case {
    z: Vec<f64>,
    c_noise: Vec<f64>,
    bundles: Vec<ConditionBundle<f64>>,
    batch: usize,
    steps: usize,
}

impl Case {
    fn new(cfg: &NetConfig, batch: usize, steps: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed, 9);
        Case {
            z: rng.normal_vec(batch * steps * cfg.stack * cfg.dim, 1.0),
            c_noise: (0..batch * steps).map(|_| rng.normal() * 0.5).collect(),
            bundles: (0..batch).map(|_| bundle(&mut rng, steps * cfg.stack)).collect(),
            batch,
            steps,
        }
    }

    fn input(&self, t0: usize) -> NetInput<'_, f64> {
        NetInput {
            z: &self.z,
            batch: self.batch,
            steps: self.steps,
            c_noise: &self.c_noise,
            bundles: &self.bundles,
            t0,
        }
    }
}

#[test]
fn output_shape_matches_input() {
    for (dim, widths, heads) in [(8, vec![8], 2), (5, vec![4, 8], 4), (53, vec![8], 1), (1, vec![4], 1)] {
        let cfg = NetConfig {
            dim,
            stack: 2,
            levels: widths.len(),
            widths,
            heads,
            cond_dim: 4,
            emb_dim: 4,
            ..NetConfig::default()
        };
        let (net, w) = random_net(cfg.clone(), 1);
        for steps in [1, 3] {
            let case = Case::new(&cfg, 2, steps, 2);
            let out = net.forward(&w, &case.input(0)).unwrap();
            assert_eq!(out.shape(), &[2, steps, 2, dim]);
        }
    }
}

#[test]
fn rejects_mismatched_shapes() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 1);
    let mut case = Case::new(&cfg, 1, 2, 3);
    case.c_noise.push(0.0);
    assert!(net.forward(&w, &case.input(0)).is_err());
    let mut case = Case::new(&cfg, 1, 2, 3);
    case.bundles[0].stimuli.pop();
    assert!(net.forward(&w, &case.input(0)).is_err());
    let mut case = Case::new(&cfg, 1, 2, 3);
    case.z.pop();
    assert!(net.forward(&w, &case.input(0)).is_err());
}

#[test]
fn duplicated_batch_duplicates_output() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 4);
    let one = Case::new(&cfg, 1, 3, 5);
    let two = Case {
        z: [one.z.clone(), one.z.clone()].concat(),
        c_noise: [one.c_noise.clone(), one.c_noise.clone()].concat(),
        bundles: vec![one.bundles[0].clone(), one.bundles[0].clone()],
        batch: 2,
        steps: 3,
    };
    let a = net.forward(&w, &one.input(0)).unwrap();
    let b = net.forward(&w, &two.input(0)).unwrap();
    let n = a.len();
    assert_eq!(&b.data()[..n], a.data());
    assert_eq!(&b.data()[n..], a.data());
}

#[test]
fn forward_is_bit_stable() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 6);
    let case = Case::new(&cfg, 2, 4, 7);
    let a = net.forward(&w, &case.input(3)).unwrap();
    let b = net.forward(&w, &case.input(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn matches_straight_line_reference() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 8);
    let mut case = Case::new(&cfg, 2, 4, 9);
    case.bundles[1].null_mask = [false, true, false];
    case.bundles[0].trim = 5;
    let out = net.forward(&w, &case.input(2)).unwrap();
    let expect = reference::forward(&cfg, &w, &case.z, 2, 4, &case.c_noise, &case.bundles, 2);
    assert_eq!(out.len(), expect.len());
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
    // two levels, odd spatial length
    let cfg2 = NetConfig {
        dim: 5,
        stack: 2,
        widths: vec![4, 8],
        levels: 2,
        heads: 2,
        cond_dim: 4,
        emb_dim: 6,
        ..NetConfig::default()
    };
    let (net, w) = random_net(cfg2.clone(), 10);
    let case = Case::new(&cfg2, 1, 3, 11);
    let out = net.forward(&w, &case.input(0)).unwrap();
    let expect = reference::forward(&cfg2, &w, &case.z, 1, 3, &case.c_noise, &case.bundles, 0);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

fn zero_params(w: &mut NetWeights<f64>, pattern: &str) -> usize {
    let names: Vec<String> = w.names().iter().filter(|n| n.contains(pattern)).cloned().collect();
    for n in &names {
        w.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    names.len()
}

#[test]
fn zeroed_cross_attention_values_ignore_conditions() {
    let cfg = tiny_config();
    let (net, mut w) = random_net(cfg.clone(), 12);
    assert!(zero_params(&mut w, "cross.v.") > 0);
    let case = Case::new(&cfg, 1, 3, 13);
    let base = net.forward(&w, &case.input(0)).unwrap();
    let mut other = Case::new(&cfg, 1, 3, 13);
    other.bundles = vec![bundle(&mut Rng::new(99, 0), 12)];
    other.bundles[0].null_mask = [true, false, true];
    assert_eq!(net.forward(&w, &other.input(0)).unwrap(), base);
}

#[test]
fn zeroed_temporal_values_isolate_frames() {
    let cfg = tiny_config();
    let (net, mut w) = random_net(cfg.clone(), 14);
    assert!(zero_params(&mut w, "temporal.attn.v.") > 0);
    let case = Case::new(&cfg, 1, 4, 15);
    let base = net.forward(&w, &case.input(0)).unwrap();
    let mut pert = Case::new(&cfg, 1, 4, 15);
    let step_len = cfg.stack * cfg.dim;
    for v in &mut pert.z[2 * step_len..3 * step_len] {
        *v += 1.5;
    }
    pert.c_noise[2] += 0.7;
    let out = net.forward(&w, &pert.input(0)).unwrap();
    for step in [0, 1, 3] {
        let r = step * step_len..(step + 1) * step_len;
        assert_eq!(&out.data()[r.clone()], &base.data()[r]);
    }
    let r = 2 * step_len..3 * step_len;
    assert_ne!(&out.data()[r.clone()], &base.data()[r]);
}

#[test]
fn without_temporal_embedding_steps_permute_equivariantly() {
    let cfg = NetConfig {
        temporal_embedding: false,
        ..tiny_config()
    };
    let (net, w) = random_net(cfg.clone(), 16);
    let case = Case::new(&cfg, 1, 4, 17);
    let perm = [2usize, 0, 3, 1];
    let step_len = cfg.stack * cfg.dim;
    let s = cfg.stack;
    let mut permuted = Case::new(&cfg, 1, 4, 17);
    for (new, &old) in perm.iter().enumerate() {
        permuted.z[new * step_len..(new + 1) * step_len].copy_from_slice(&case.z[old * step_len..(old + 1) * step_len]);
        permuted.c_noise[new] = case.c_noise[old];
        permuted.bundles[0].stimuli[new * s..(new + 1) * s]
            .copy_from_slice(&case.bundles[0].stimuli[old * s..(old + 1) * s]);
    }
    let a = net.forward(&w, &case.input(0)).unwrap();
    let b = net.forward(&w, &permuted.input(0)).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..step_len {
            let (x, y) = (b.data()[new * step_len + j], a.data()[old * step_len + j]);
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
    // with embeddings the same permutation is generally not equivariant
    let (net2, w2) = random_net(tiny_config(), 16);
    let a = net2.forward(&w2, &case.input(0)).unwrap();
    let b = net2.forward(&w2, &permuted.input(0)).unwrap();
    let differs = perm.iter().enumerate().any(|(new, &old)| {
        (0..step_len).any(|j| (b.data()[new * step_len + j] - a.data()[old * step_len + j]).abs() > 1e-9)
    });
    assert!(differs);
}

// ---- condition encoder ----

#[test]
fn all_null_conditions_ignore_values() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 18);
    let mut rng = Rng::new(1, 1);
    let a = bundle(&mut rng, 8).all_null();
    let b = bundle(&mut rng, 8).all_null();
    let ea = net.encode_conditions(&w, &[a], 2).unwrap();
    let eb = net.encode_conditions(&w, &[b], 2).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn masked_channel_value_is_irrelevant() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 19);
    let mut rng = Rng::new(2, 1);
    let a = bundle(&mut rng, 8).with_null(ConditionChannel::Emotion);
    let mut b = a.clone();
    b.emotion = -7.0;
    assert_eq!(
        net.encode_conditions(&w, &[a.clone()], 2).unwrap(),
        net.encode_conditions(&w, &[b], 2).unwrap()
    );
    let mut c = a.clone();
    c.expressiveness += 1.0;
    assert_ne!(
        net.encode_conditions(&w, &[a], 2).unwrap(),
        net.encode_conditions(&w, &[c], 2).unwrap()
    );
}

#[test]
fn condition_encoder_matches_direct_mlp() {
    let cfg = NetConfig {
        stack: 2,
        cond_dim: 3,
        ..tiny_config()
    };
    let (net, w) = random_net(cfg.clone(), 20);
    let mut b = ConditionBundle::new(vec![0.5, 1.0, 2.0, 4.0], 0.8, -0.3);
    b.trim = 1;
    let emb = net.encode_conditions(&w, &[b], 2).unwrap();
    assert_eq!(emb.shape(), &[1, 2, 3]);
    let g = |n: &str| w.get(n).unwrap().data().to_vec();
    let null = g("cond.null_stimuli");
    let inputs = [vec![null[0], 1.0, 0.8, -0.3], vec![2.0, 4.0, 0.8, -0.3]];
    let (w1, b1, w2, b2) = (g("cond.mlp.0.weight"), g("cond.mlp.0.bias"), g("cond.mlp.1.weight"), g("cond.mlp.1.bias"));
    for (step, u) in inputs.iter().enumerate() {
        let h: Vec<f64> = (0..3)
            .map(|o| {
                let a = b1[o] + (0..4).map(|i| u[i] * w1[i * 3 + o]).sum::<f64>();
                a / (1.0 + (-a).exp())
            })
            .collect();
        for o in 0..3 {
            let y = b2[o] + (0..3).map(|i| h[i] * w2[i * 3 + o]).sum::<f64>();
            assert!((emb.data()[step * 3 + o] - y).abs() < 1e-12);
        }
    }
}

// ---- individual blocks ----

fn block_weights<B>(make: impl FnOnce(&mut ParamBuilder<f64>) -> B) -> (B, NetWeights<f64>) {
    let mut w = NetWeights::empty();
    let mut rng = Rng::new(5, 5);
    let b = make(&mut ParamBuilder {
        weights: &mut w,
        rng: &mut rng,
    });
    (b, w)
}

fn run(w: &NetWeights<f64>, f: impl FnOnce(&mut Fwd<f64>) -> Var) -> Tensor<f64> {
    let mut g = Graph::new(w.tensors());
    let p = (0..w.len()).map(|i| g.param(i)).collect();
    let mut fwd = Fwd { g: &mut g, p };
    let out = f(&mut fwd);
    g.value(out).clone()
}

#[test]
fn resnet_with_zero_final_conv_is_identity() {
    let (block, w) = block_weights(|pb| ResnetP::new(pb, "r", 4, 4, 4));
    let mut rng = Rng::new(1, 2);
    let x = Tensor::new(vec![3, 4, 5], rng.normal_vec(60, 1.0)).unwrap();
    let e = Tensor::new(vec![3, 4], rng.normal_vec(12, 1.0)).unwrap();
    let out = run(&w, |f: &mut Fwd<f64>| {
        let xv = f.g.input(x.clone());
        let ev = f.g.input(e.clone());
        block.fwd(f, xv, ev).unwrap()
    });
    assert_eq!(out, x);
}

#[test]
fn resnet_with_neutral_modulation_ignores_noise() {
    let (block, mut w) = block_weights(|pb| ResnetP::new(pb, "r", 2, 3, 4));
    w.randomize(&mut Rng::new(3, 3), 0.5);
    for n in ["r.emb_scale.weight", "r.emb_scale.bias", "r.emb_shift.weight", "r.emb_shift.bias"] {
        w.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = Rng::new(1, 2);
    let x = Tensor::new(vec![1, 2, 4], rng.normal_vec(8, 1.0)).unwrap();
    let outs: Vec<Tensor<f64>> = (0..2)
        .map(|i| {
            let e = Tensor::new(vec![1, 4], vec![i as f64 * 3.0; 4]).unwrap();
            run(&w, |f: &mut Fwd<f64>| {
                let xv = f.g.input(x.clone());
                let ev = f.g.input(e.clone());
                block.fwd(f, xv, ev).unwrap()
            })
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn resnet_matches_hand_convolution() {
    // one channel, d = 4; norms are the identity affine on a single group
    let (block, mut w) = block_weights(|pb| ResnetP::new(pb, "r", 1, 1, 2));
    w.get_mut("r.conv1.weight").unwrap().data_mut().copy_from_slice(&[0.5, 1.0, -0.5]);
    w.get_mut("r.conv1.bias").unwrap().data_mut()[0] = 0.1;
    w.get_mut("r.conv2.weight").unwrap().data_mut().copy_from_slice(&[0.0, 2.0, 1.0]);
    w.get_mut("r.conv2.bias").unwrap().data_mut()[0] = -0.2;
    for n in ["r.emb_scale.weight", "r.emb_shift.weight"] {
        w.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    w.get_mut("r.emb_scale.bias").unwrap().data_mut()[0] = 0.5;
    w.get_mut("r.emb_shift.bias").unwrap().data_mut()[0] = 0.25;
    let xs = [1.0, -2.0, 0.5, 3.0];
    let x = Tensor::new(vec![1, 1, 4], xs.to_vec()).unwrap();
    let e = Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap();
    let out = run(&w, |f: &mut Fwd<f64>| {
        let xv = f.g.input(x.clone());
        let ev = f.g.input(e.clone());
        block.fwd(f, xv, ev).unwrap()
    });
    let norm = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect()
    };
    let silu = |a: f64| a / (1.0 + (-a).exp());
    let conv = |v: &[f64], k: [f64; 3], b: f64| -> Vec<f64> {
        (0..4)
            .map(|o| {
                let at = |i: isize| if (0..4).contains(&i) { v[i as usize] } else { 0.0 };
                b + k[0] * at(o as isize - 1) + k[1] * at(o as isize) + k[2] * at(o as isize + 1)
            })
            .collect()
    };
    let h: Vec<f64> = norm(&xs).into_iter().map(silu).collect();
    let h = conv(&h, [0.5, 1.0, -0.5], 0.1);
    let h: Vec<f64> = norm(&h).into_iter().map(|v| silu(v * 1.5 + 0.25)).collect();
    let h = conv(&h, [0.0, 2.0, 1.0], -0.2);
    for j in 0..4 {
        assert!((out.data()[j] - (xs[j] + h[j])).abs() < 1e-12);
    }
}

#[test]
fn spatial_attention_two_positions_direct() {
    let (block, mut w) = block_weights(|pb| AttnP::new(pb, "a", 2, 2, 1));
    w.randomize(&mut Rng::new(4, 4), 0.7);
    let toks = [[0.3, -1.0], [1.2, 0.4]];
    let x = Tensor::new(vec![1, 2, 2], toks.concat()).unwrap();
    let out = run(&w, |f: &mut Fwd<f64>| {
        let xv = f.g.input(x.clone());
        block.fwd(f, xv, xv).unwrap()
    });
    let lin = |name: &str, v: &[f64]| -> Vec<f64> {
        let wt = w.get(&format!("a.{name}.weight")).unwrap().data();
        let b = w.get(&format!("a.{name}.bias")).unwrap().data();
        (0..2).map(|o| b[o] + v[0] * wt[o] + v[1] * wt[2 + o]).collect()
    };
    let q: Vec<Vec<f64>> = toks.iter().map(|t| lin("q", t)).collect();
    let k: Vec<Vec<f64>> = toks.iter().map(|t| lin("k", t)).collect();
    let v: Vec<Vec<f64>> = toks.iter().map(|t| lin("v", t)).collect();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
        let z = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z, s[1].exp() / z];
        let mixed = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        let o = lin("out", &mixed);
        for c in 0..2 {
            assert!((out.data()[i * 2 + c] - o[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_position_self_attention_is_projection() {
    let (block, mut w) = block_weights(|pb| SpatialP::new(pb, "s", 4, 3, 2));
    w.randomize(&mut Rng::new(6, 6), 0.5);
    let mut rng = Rng::new(7, 7);
    let x = Tensor::new(vec![2, 4, 1], rng.normal_vec(8, 1.0)).unwrap();
    let cond = Tensor::new(vec![2, 1, 3], rng.normal_vec(6, 1.0)).unwrap();
    // the self-attention softmax over one key is exactly 1, so the query and
    // key projections cannot influence the output
    let base = run(&w, |f: &mut Fwd<f64>| {
        let xv = f.g.input(x.clone());
        let cv = f.g.input(cond.clone());
        block.fwd(f, xv, cv).unwrap()
    });
    let mut w2 = w.clone();
    w2.get_mut("s.self.q.weight").unwrap().data_mut().iter_mut().for_each(|v| *v *= -3.0);
    w2.get_mut("s.self.k.bias").unwrap().data_mut().iter_mut().for_each(|v| *v += 2.0);
    let other = run(&w2, |f: &mut Fwd<f64>| {
        let xv = f.g.input(x.clone());
        let cv = f.g.input(cond.clone());
        block.fwd(f, xv, cv).unwrap()
    });
    for (a, b) in base.data().iter().zip(other.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn temporal_single_step_is_projection() {
    let (block, mut w) = block_weights(|pb| TemporalP::new(pb, "t", 4, 4, 2));
    w.randomize(&mut Rng::new(8, 8), 0.5);
    let mut rng = Rng::new(9, 9);
    let x = Tensor::new(vec![1, 4, 3], rng.normal_vec(12, 1.0)).unwrap();
    let e = Tensor::new(vec![1, 4], rng.normal_vec(4, 1.0)).unwrap();
    let eval = |w: &NetWeights<f64>| {
        run(w, |f: &mut Fwd<f64>| {
            let xv = f.g.input(x.clone());
            let ev = f.g.input(e.clone());
            block.fwd(f, xv, ev, 1).unwrap()
        })
    };
    let base = eval(&w);
    let mut w2 = w.clone();
    w2.get_mut("t.attn.k.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 5.0);
    let other = eval(&w2);
    for (a, b) in base.data().iter().zip(other.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

// ---- gradients ----

fn grad_config() -> NetConfig {
    NetConfig {
        dim: 4,
        stack: 2,
        widths: vec![2],
        levels: 1,
        heads: 1,
        cond_dim: 2,
        emb_dim: 2,
        ..NetConfig::default()
    }
}

#[test]
fn gradients_match_central_differences() {
    let cfg = grad_config();
    let (net, w) = random_net(cfg.clone(), 21);
    assert!(w.num_scalars() <= 1000, "{} parameters", w.num_scalars());
    let mut case = Case::new(&cfg, 2, 3, 22);
    case.bundles[1].null_mask = [true, true, true];
    case.bundles[0].trim = 2;
    let target = Tensor::new(vec![2, 3, 2, 4], Rng::new(1, 23).normal_vec(48, 1.0)).unwrap();
    let loss_of = |w: &NetWeights<f64>| -> f64 {
        let mut g = Graph::new(w.tensors());
        let out = net.build(&mut g, &case.input(1)).unwrap();
        let l = g.weighted_mse(out, target.clone(), None).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(w.tensors());
    let out = net.build(&mut g, &case.input(1)).unwrap();
    let l = g.weighted_mse(out, target.clone(), None).unwrap();
    let grads = parameter_gradients(g.backward(l).unwrap(), &w).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, t) in w.tensors().iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = w.clone();
            plus.tensors_mut()[pi].data_mut()[j] += h;
            let mut minus = w.clone();
            minus.tensors_mut()[pi].data_mut()[j] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads[pi].data()[j];
            let scale = an.abs().max(fd.abs());
            let err = (an - fd).abs();
            assert!(
                err <= 1e-4 * scale + 1e-10,
                "{}[{j}]: analytic {an} vs fd {fd}",
                w.names()[pi]
            );
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn non_finite_gradients_are_faults() {
    let cfg = grad_config();
    let (net, mut w) = random_net(cfg.clone(), 24);
    w.get_mut("conv_out.bias").unwrap().data_mut()[0] = f64::INFINITY;
    let case = Case::new(&cfg, 1, 2, 25);
    let mut g = Graph::new(w.tensors());
    let out = net.build(&mut g, &case.input(0)).unwrap();
    let l = g.weighted_mse(out, Tensor::zeros(&[1, 2, 2, 4]), None).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(matches!(parameter_gradients(grads, &w), Err(Error::NonFinite(_))));
}

#[test]
fn f32_network_tracks_f64() {
    let cfg = tiny_config();
    let (net, w) = random_net(cfg.clone(), 26);
    let case = Case::new(&cfg, 1, 2, 27);
    let out64 = net.forward(&w, &case.input(0)).unwrap();
    let w32: NetWeights<f32> = w.cast();
    let net32 = UNet::<f32>::with_weights(cfg, &w32).unwrap();
    let z: Vec<f32> = case.z.iter().map(|&v| v as f32).collect();
    let cn: Vec<f32> = case.c_noise.iter().map(|&v| v as f32).collect();
    let bundles: Vec<ConditionBundle<f32>> = case.bundles.iter().map(|b| b.cast()).collect();
    let out32 = net32
        .forward(
            &w32,
            &NetInput {
                z: &z,
                batch: 1,
                steps: 2,
                c_noise: &cn,
                bundles: &bundles,
                t0: 0,
            },
        )
        .unwrap();
    for (a, b) in out64.data().iter().zip(out32.data()) {
        assert!((a - *b as f64).abs() < 1e-3 * (1.0 + a.abs()));
    }
}
