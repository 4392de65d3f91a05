//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails.
//!
//! The alignment and ablation criteria train 15 models through the CLI on
//! the committed config (`configs/linewalk.ini`) and take roughly 25 minutes
//! on one CPU core.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radt_core::aligners::{
    adaptive_scale, causal_self_attention, modality_masses, seqra_attention, stepra, tensor3, AttentionParams,
    Modality, PadMask, SeqRaParams, StepRaParams, TimestepMap,
};
use radt_core::data::{generate_dataset, Batch, Dataset, GenerateOptions, PolicyMix, Window};
use radt_core::envs::{Action, ActionSpace, EnvId, EnvSpec};
use radt_core::eval::{attention_probe, build_target_grid, evaluate_policy};
use radt_core::layers::{finite_diff_check_params, AttentionKind, EmbeddingTable, Forward, Init, Linear, MlpHead, ParamStore};
use radt_core::model::{radt_block, Model, RadtBlock, RadtConfig, Variant};
use radt_core::tensor::{Tensor, Unary, Var};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn jitter(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-amp..amp);
        }
    }
}

fn random3(b: usize, l: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    tensor3(b, l, d, |_, _, _| r.random_range(-1.0..1.0))
}

/// Weighted sum of `y` with fixed random weights: a scalar whose gradient
/// reaches every output element.
fn readout(f: &mut Forward, y: Var, seed: u64) -> radt_core::Result<Var> {
    let s = f.graph.shape(y).to_vec();
    let mut r = rng(seed);
    let n: usize = s.iter().product();
    let w = Tensor::new(s, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let w = f.graph.constant(w);
    let p = f.graph.mul(y, w)?;
    f.graph.sum_all(p)
}

fn config(env: EnvId, variant: Variant, k: usize, d: usize, layers: usize, heads: usize) -> RadtConfig {
    let mut c = RadtConfig::for_env(&EnvSpec::new(env), variant);
    c.context_length = k;
    c.d_model = d;
    c.n_layers = layers;
    c.n_heads = heads;
    c.dropout = 0.0;
    c
}

/// `b` random windows of length `k`; the first is shorter (left-padded) when
/// `pad_first` is set.
fn random_batch(env: EnvId, b: usize, k: usize, seed: u64, pad_first: bool) -> Batch {
    let spec = EnvSpec::new(env);
    let mut r = rng(seed);
    let mut owned = Vec::new();
    for i in 0..b {
        let n = if pad_first && i == 0 && k > 1 { r.random_range(1..k) } else { k };
        let start = r.random_range(0..spec.horizon - n + 1);
        let rtg: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..40.0)).collect();
        let states: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..spec.state_dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let actions: Vec<Action> = (0..n)
            .map(|_| match spec.action_space {
                ActionSpace::Continuous { dim, .. } => {
                    Action::Continuous((0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
                }
                ActionSpace::Discrete(m) => Action::Discrete(r.random_range(0..m)),
            })
            .collect();
        owned.push((rtg, states, actions, start));
    }
    let windows: Vec<Window> = owned
        .iter()
        .map(|(rtg, s, a, start)| Window {
            returns_to_go: rtg,
            states: s,
            actions: a,
            start_timestep: *start,
        })
        .collect();
    Batch::from_windows(&windows, k, spec.state_dim, spec.action_space).expect("valid windows")
}

// ------------------------------------------------------------------ gradients

/// Max relative error (denominator `max(|g|, 1e-8)`) of autodiff parameter
/// gradients against the fourth-order central stencil
/// `(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h`.
fn fd_fourth_order(store: &ParamStore, build: &dyn Fn(&mut Forward) -> radt_core::Result<Var>, h: f64) -> radt_core::Result<f64> {
    let mut f = Forward::eval_with_grads(store);
    let out = build(&mut f)?;
    f.graph.backward(out)?;
    let grads = f.param_grads();
    let eval = |s: &ParamStore| -> radt_core::Result<f64> {
        let mut f = Forward::eval(s);
        let out = build(&mut f)?;
        Ok(f.graph.value(out).data()[0])
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (slot, id) in store.ids().enumerate() {
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[i];
            let mut at = |dx: f64| {
                probe.get_mut(id).value.data_mut()[i] = orig + dx;
                let v = eval(&probe);
                probe.get_mut(id).value.data_mut()[i] = orig;
                v
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            worst = worst.max((numeric - grads[slot][i]).abs() / grads[slot][i].abs().max(1e-8));
        }
    }
    Ok(worst)
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut results: Vec<(&str, f64)> = Vec::new();
    let fd = |store: &ParamStore, build: &dyn Fn(&mut Forward) -> radt_core::Result<Var>| {
        finite_diff_check_params(store, build, 1e-5).map_err(|e| e.to_string())
    };
    // Some whole-model gradients are ~1e-8, where a plain central difference
    // at any single step is either roundoff- or truncation-limited.
    let fd_model = |store: &ParamStore, build: &dyn Fn(&mut Forward) -> radt_core::Result<Var>| {
        fd_fourth_order(store, build, 1e-3).map_err(|e| e.to_string())
    };

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 5, 3, true, Init::ScaledNormal, &mut rng(1));
    jitter(&mut s, 2, 0.5);
    let x = random3(2, 4, 5, 3);
    results.push(("linear", fd(&s, &|f| {
        let xv = f.graph.constant(x.clone());
        let y = lin.forward(f, xv)?;
        readout(f, y, 4)
    })?));

    let mut s = ParamStore::new();
    let mlp = MlpHead::new(&mut s, "mlp", &[4, 6, 3], Unary::Silu, true, &mut rng(5));
    jitter(&mut s, 6, 0.5);
    let x = random3(2, 3, 4, 7);
    results.push(("mlp", fd(&s, &|f| {
        let xv = f.graph.constant(x.clone());
        let y = mlp.forward(f, xv)?;
        readout(f, y, 8)
    })?));

    let mut s = ParamStore::new();
    let emb = EmbeddingTable::new(&mut s, "emb", 7, 4, &mut rng(9));
    results.push(("embedding", fd(&s, &|f| {
        let y = emb.lookup(f, vec![0, 3, 3, 6, 1, 2], vec![2, 3])?;
        readout(f, y, 10)
    })?));

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "pre", 4, 4, true, Init::ScaledNormal, &mut rng(11));
    jitter(&mut s, 12, 0.5);
    let x = random3(2, 3, 4, 13);
    results.push(("layer norm", fd(&s, &|f| {
        let xv = f.graph.constant(x.clone());
        let h = lin.forward(f, xv)?;
        let y = f.graph.layer_norm(h, 1e-5)?;
        readout(f, y, 14)
    })?));

    let k = 3;
    let map = TimestepMap::state_action(2 * k - 1);
    let pad = PadMask::new(2, k, vec![false, true, true, true, true, true]).map_err(|e| e.to_string())?;
    let xt = random3(2, 2 * k - 1, 4, 15);
    let rt = random3(2, k, 4, 16);

    let mut s = ParamStore::new();
    let att = AttentionParams::new(&mut s, "att", 4, 2, 0.0, &mut rng(17)).map_err(|e| e.to_string())?;
    jitter(&mut s, 18, 0.4);
    results.push(("causal self-attention", fd(&s, &|f| {
        let xv = f.graph.constant(xt.clone());
        let y = causal_self_attention(f, &att, xv, &map, &pad, 0)?;
        readout(f, y, 19)
    })?));

    let mut s = ParamStore::new();
    let sq = SeqRaParams::new(&mut s, "seqra", 4, 2, 0.0, &mut rng(20)).map_err(|e| e.to_string())?;
    jitter(&mut s, 21, 0.4);
    results.push(("SeqRA + adaptive scaling", fd(&s, &|f| {
        let xv = f.graph.constant(xt.clone());
        let rv = f.graph.constant(rt.clone());
        let z = seqra_attention(f, &sq, xv, rv, &map, &pad, 0)?;
        let y = adaptive_scale(f, &sq, z, xv)?;
        readout(f, y, 22)
    })?));

    let mut s = ParamStore::new();
    let st = StepRaParams::new(&mut s, "stepra", 4, &mut rng(23));
    jitter(&mut s, 24, 0.4);
    results.push(("StepRA", fd(&s, &|f| {
        let xv = f.graph.constant(xt.clone());
        let rv = f.graph.constant(rt.clone());
        let y = stepra(f, &st, xv, rv, &map)?;
        readout(f, y, 25)
    })?));

    for (name, env, variant, seed) in [
        ("full RADT (K=3, D=16, 2 layers)", EnvId::LineWalk, Variant::Radt, 30),
        ("full DT", EnvId::DelayChain, Variant::Dt, 50),
    ] {
        let mut m = Model::new(config(env, variant, 3, 16, 2, 2), 20.0, seed).map_err(|e| e.to_string())?;
        jitter(&mut m.store, seed + 1, 0.3);
        let batch = random_batch(env, 2, 3, seed + 2, true);
        results.push((name, fd_model(&m.store, &|f| {
            let p = m.forward(f, &batch)?;
            m.loss(f, p, &batch, false)
        })?));
    }

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let msg = format!("max rel err {worst:.2e} in {secs:.1} s [{}]", detail.join(", "));
    if worst < 1e-4 && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------- zero-init identity
//
// Plain-loop post-LN transformer decoder block (causal self-attention,
// cross-attention onto the return tokens, GELU feed-forward), independent of
// the graph engine.

type Mat = Vec<Vec<f64>>;

fn apply(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = &store.get(l.weight).value;
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let b = l.bias.map_or(vec![0.0; o], |b| store.get(b).value.data().to_vec());
    x.iter()
        .map(|row| {
            (0..o)
                .map(|r| (0..i).map(|c| w.data()[r * i + c] * row[c]).sum::<f64>() + b[r])
                .collect()
        })
        .collect()
}

fn ln(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn attention(store: &ParamStore, p: &AttentionParams, q_src: &Mat, kv_src: &Mat, visible: impl Fn(usize, usize) -> bool) -> Mat {
    let (q, k, v) = (apply(store, &p.wq, q_src), apply(store, &p.wk, kv_src), apply(store, &p.wv, kv_src));
    let d = q[0].len();
    let dh = d / p.n_heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..p.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let logits: Vec<Option<f64>> = (0..k.len())
                .map(|j| visible(i, j).then(|| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()))
                .collect();
            let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    apply(store, &p.wo, &out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_block(store: &ParamStore, blk: &RadtBlock, sa: &Mat, r: &Mat) -> Mat {
    let x = ln(&add(sa, &attention(store, &blk.attn, sa, sa, |i, j| j <= i)));
    let s = blk.seqra.as_ref().expect("full RADT block has SeqRA");
    let x = ln(&add(&x, &attention(store, &s.attention, &x, r, |i, j| j <= i / 2)));
    let h: Mat = apply(store, &blk.ff.fc1, &x)
        .into_iter()
        .map(|row| row.into_iter().map(gelu).collect())
        .collect();
    ln(&add(&x, &apply(store, &blk.ff.fc2, &h)))
}

fn rows(t: &Tensor, b: usize) -> Mat {
    let (l, d) = (t.shape()[1], t.shape()[2]);
    (0..l).map(|i| t.data()[(b * l + i) * d..(b * l + i + 1) * d].to_vec()).collect()
}

fn zero_init_identity() -> Check {
    let mut worst: f64 = 0.0;
    for (seed, k, d, heads) in [(1u64, 3, 8, 2), (2, 5, 16, 1), (3, 10, 32, 4)] {
        let m = Model::new(config(EnvId::LineWalk, Variant::Radt, k, d, 2, heads), 10.0, seed).map_err(|e| e.to_string())?;
        for (layer, blk) in m.radt_blocks().iter().enumerate() {
            let sa = random3(2, 2 * k - 1, d, seed * 10 + layer as u64);
            let ret = random3(2, k, d, seed * 10 + 5 + layer as u64);
            let map = TimestepMap::state_action(2 * k - 1);
            let pad = PadMask::all_real(2, k);
            let mut f = Forward::eval(&m.store);
            let (x, rv) = (f.graph.constant(sa.clone()), f.graph.constant(ret.clone()));
            let y = radt_block(&mut f, blk, x, rv, &map, &pad, layer).map_err(|e| e.to_string())?;
            let y = f.graph.value(y).clone();
            for b in 0..2 {
                let expect = reference_block(&m.store, blk, &rows(&sa, b), &rows(&ret, b));
                let got = rows(&y, b);
                let diff = got.iter().flatten().zip(expect.iter().flatten()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
            }
        }
    }
    let msg = format!("max abs diff vs post-LN decoder block {worst:.2e} over 3 configs x 2 layers");
    if worst < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ------------------------------------------------------------------ causality

fn causality() -> Check {
    let mut r = rng(77);
    let k = 5;
    for case in 0..100u64 {
        let variant = if case % 2 == 0 { Variant::Radt } else { Variant::Dt };
        let env = [EnvId::LineWalk, EnvId::GridCollect, EnvId::DelayChain][(case / 2 % 3) as usize];
        let mut m = Model::new(config(env, variant, k, 8, 2, 2), 20.0, case).map_err(|e| e.to_string())?;
        jitter(&mut m.store, 1000 + case, 0.5);
        let batch = random_batch(env, 2, k, 2000 + case, case % 5 == 0);
        let t = r.random_range(0..k);
        let mut p = batch.clone();
        let sd = batch.state_dim;
        for b in 0..batch.size {
            for j in t + 1..k {
                let slot = b * k + j;
                p.returns_to_go[slot] += r.random_range(-30.0..30.0);
                for v in &mut p.states[slot * sd..(slot + 1) * sd] {
                    *v += r.random_range(-2.0..2.0);
                }
                p.timesteps[slot] = r.random_range(0..20);
                match &mut p.actions {
                    radt_core::data::ActionBatch::Continuous { dim, values } => {
                        for v in &mut values[slot * *dim..(slot + 1) * *dim] {
                            *v = r.random_range(-1.0..1.0);
                        }
                    }
                    radt_core::data::ActionBatch::Discrete { n, index } => index[slot] = r.random_range(0..*n),
                }
            }
        }
        let y0 = m.predict(&batch).map_err(|e| e.to_string())?;
        let y1 = m.predict(&p).map_err(|e| e.to_string())?;
        let w = y0.shape()[2];
        for b in 0..2 {
            for j in 0..=t {
                for c in 0..w {
                    if y0.at(&[b, j, c]).to_bits() != y1.at(&[b, j, c]).to_bits() {
                        return Err(format!("case {case} ({variant:?}, {env}): position {j} changed after perturbing timesteps > {t}"));
                    }
                }
            }
        }
    }
    Ok("100 random cases (RADT and DT, 3 envs): predictions bit-identical".into())
}

// -------------------------------------------------------------- SeqRA mass

fn seqra_mass() -> Check {
    let mut calls = 0;
    let mut max_row_err: f64 = 0.0;
    for (case, env) in [EnvId::LineWalk, EnvId::GridCollect, EnvId::DelayChain].into_iter().enumerate() {
        let k = 4;
        let mut m = Model::new(config(env, Variant::Radt, k, 8, 3, 2), 20.0, case as u64).map_err(|e| e.to_string())?;
        jitter(&mut m.store, 90 + case as u64, 0.5);
        let batch = random_batch(env, 3, k, 95 + case as u64, true);
        let (_, probes) = m.predict_with_probes(&batch).map_err(|e| e.to_string())?;
        for rec in probes.iter().filter(|p| p.kind == AttentionKind::SeqRa) {
            calls += 1;
            let lk = rec.scores.shape()[2];
            if lk != k {
                return Err(format!("SeqRA layer {} attends over {lk} keys, expected the {k} return tokens", rec.layer));
            }
            let keys = vec![Modality::Return; lk];
            for row in rec.scores.data().chunks(lk) {
                max_row_err = max_row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                let masses = modality_masses(row, &keys);
                if masses != [1.0, 0.0, 0.0] {
                    return Err(format!("layer {} row masses {masses:?}", rec.layer));
                }
            }
        }
    }
    if calls != 9 {
        return Err(format!("expected 9 SeqRA calls, recorded {calls}"));
    }
    // Episode-averaged probe on rollouts.
    let ds = generate_dataset(EnvId::LineWalk, &PolicyMix::default_for(EnvId::LineWalk), 40, 3, GenerateOptions::default())
        .map_err(|e| e.to_string())?;
    let grid = build_target_grid(&ds).map_err(|e| e.to_string())?;
    let mut m = Model::new(config(EnvId::LineWalk, Variant::Radt, 5, 8, 2, 1), ds.return_scale, 4).map_err(|e| e.to_string())?;
    jitter(&mut m.store, 5, 0.3);
    let (_, episodes) = evaluate_policy(&m, &ds.spec(), &grid, 1, 0).map_err(|e| e.to_string())?;
    let probe = attention_probe(&m, &episodes).map_err(|e| e.to_string())?;
    if let Some(p) = probe.iter().find(|p| p.return_mass != 1.0) {
        return Err(format!("rollout probe return mass {}", p.return_mass));
    }
    Ok(format!(
        "{calls} SeqRA calls and {} rollout probes: return mass exactly 1.0 (row sums within {max_row_err:.1e})",
        probe.len()
    ))
}

// ----------------------------------------------------------- StepRA locality

fn stepra_locality() -> Check {
    let mut checked = 0;
    for (seed, k, d) in [(1u64, 3, 4), (2, 6, 8), (3, 10, 16)] {
        let mut s = ParamStore::new();
        let p = StepRaParams::new(&mut s, "n", d, &mut rng(seed));
        jitter(&mut s, seed + 100, 0.5);
        let map = TimestepMap::state_action(2 * k - 1);
        let xt = random3(2, 2 * k - 1, d, seed + 200);
        let rt = random3(2, k, d, seed + 300);
        let run = |r: &Tensor| -> Result<Tensor, String> {
            let mut f = Forward::eval(&s);
            let x = f.graph.constant(xt.clone());
            let rv = f.graph.constant(r.clone());
            let y = stepra(&mut f, &p, x, rv, &map).map_err(|e| e.to_string())?;
            Ok(f.graph.value(y).clone())
        };
        let y0 = run(&rt)?;
        let mut r = rng(seed + 400);
        for kk in 0..k {
            let mut pert = rt.clone();
            for b in 0..2 {
                for c in 0..d {
                    pert.data_mut()[(b * k + kk) * d + c] += r.random_range(0.5..3.0);
                }
            }
            let y1 = run(&pert)?;
            for b in 0..2 {
                for pos in 0..map.len() {
                    let same = (0..d).all(|c| y0.at(&[b, pos, c]).to_bits() == y1.at(&[b, pos, c]).to_bits());
                    let j = map.timestep(pos);
                    if j != kk && !same {
                        return Err(format!("perturbing r_{kk} changed position {pos} (timestep {j})"));
                    }
                    if j == kk && same {
                        return Err(format!("perturbing r_{kk} left its own timestep unchanged"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} (perturbation, position) pairs: other timesteps bit-identical"))
}

// ------------------------------------------------------------ bookkeeping

fn bookkeeping() -> Check {
    let mut traj_count = 0;
    let mut step_count = 0;
    for env in EnvId::ALL {
        let ds = generate_dataset(env, &PolicyMix::default_for(env), 60, 11, GenerateOptions::default())
            .map_err(|e| e.to_string())?;
        let reloaded = Dataset::from_reader(ds.to_jsonl().as_bytes()).map_err(|e| e.to_string())?;
        for (orig, back) in ds.trajectories.iter().zip(&reloaded.trajectories) {
            for traj in [orig, back] {
                let n = traj.rewards.len();
                for t in 0..n {
                    let suffix: f64 = traj.rewards[t..].iter().sum();
                    if suffix.to_bits() != traj.returns_to_go[t].to_bits() {
                        return Err(format!("{env}: rtg[{t}] {} != suffix sum {suffix}", traj.returns_to_go[t]));
                    }
                }
                if traj.returns_to_go[0].to_bits() != traj.total_return.to_bits() {
                    return Err(format!("{env}: rtg[0] != total return"));
                }
                traj_count += 1;
            }
        }
        let grid = build_target_grid(&ds).map_err(|e| e.to_string())?;
        let mut m = Model::new(config(env, Variant::Radt, 4, 8, 1, 1), ds.return_scale, 21).map_err(|e| e.to_string())?;
        jitter(&mut m.store, 22, 0.3);
        let (_, episodes) = evaluate_policy(&m, &ds.spec(), &grid, 2, 5).map_err(|e| e.to_string())?;
        for ep in &episodes {
            let mut spent = 0.0;
            for (t, st) in ep.steps.iter().enumerate() {
                let expect = ep.target_return - spent;
                if st.rtg.to_bits() != expect.to_bits() {
                    return Err(format!("{env} rollout step {t}: rtg {} != target - spent {expect}", st.rtg));
                }
                spent += st.reward;
                step_count += 1;
            }
            if ep.final_rtg().to_bits() != (ep.target_return - ep.actual_return).to_bits() {
                return Err(format!("{env}: final rtg != target - actual"));
            }
        }
    }
    Ok(format!("{traj_count} dataset trajectories and {step_count} rollout steps bit-exact"))
}

// ---------------------------------------------------------------- experiment

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_radt-lab")
}

fn committed_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/linewalk.ini")
}

fn radt_lab(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(bin())
        .args(args)
        .env_remove("RADT_LAB_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "radt-lab {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

struct VariantResult {
    grand_mean: f64,
    top_final_rtg: f64,
}

fn read_ablation(dir: &Path) -> Result<Vec<(String, VariantResult)>, String> {
    let text = std::fs::read_to_string(dir.join("summary.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let table = &v["table"];
    let variants = table["variants"].as_array().ok_or("summary has no variants")?;
    variants
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let cell = &table["cells"][i][0];
            let num = |k: &str| cell[k].as_f64().ok_or(format!("missing {k} for {name}"));
            Ok((
                name.as_str().unwrap_or_default().to_string(),
                VariantResult {
                    grand_mean: num("grand_mean")?,
                    top_final_rtg: num("top_final_rtg")?,
                },
            ))
        })
        .collect()
}

struct Experiment {
    alignment: Check,
    results: Result<Vec<(String, VariantResult)>, String>,
}

/// Trains and evaluates RADT and DT (timed), then the ablation variants.
fn run_experiment(root: &Path) -> Experiment {
    let cfg = committed_config();
    let cfg = cfg.to_str().expect("utf-8 path");
    let main_dir = root.join("main");
    let start = Instant::now();
    let main = radt_lab(&["ablate", "--config", cfg, "--variants", "full,dt", "--out", main_dir.to_str().unwrap()])
        .and_then(|_| read_ablation(&main_dir));
    let secs = start.elapsed().as_secs_f64();
    let alignment = match &main {
        Err(e) => Err(e.clone()),
        Ok(rows) => {
            let get = |n: &str| rows.iter().find(|r| r.0 == n).map(|r| r.1.grand_mean);
            match (get("full"), get("dt")) {
                (Some(radt), Some(dt)) => {
                    let reduction = 1.0 - radt / dt;
                    let msg = format!(
                        "RADT {radt:.3} vs DT {dt:.3} grand-mean normalized error: {:.1}% reduction; {:.1} min",
                        100.0 * reduction,
                        secs / 60.0
                    );
                    if radt < dt && reduction >= 0.25 && secs < 30.0 * 60.0 {
                        Ok(msg)
                    } else {
                        Err(msg)
                    }
                }
                _ => Err("summary lacks full or dt".into()),
            }
        }
    };
    let abl_dir = root.join("ablation");
    let results = main.and_then(|mut rows| {
        radt_lab(&[
            "ablate",
            "--config",
            cfg,
            "--variants",
            "no-seqra,no-stepra,no-stepra-adascale",
            "--out",
            abl_dir.to_str().unwrap(),
        ])?;
        rows.extend(read_ablation(&abl_dir)?);
        Ok(rows)
    });
    Experiment { alignment, results }
}

fn ablation_ordering(results: &[(String, VariantResult)]) -> Check {
    let get = |n: &str| -> Result<f64, String> {
        results.iter().find(|r| r.0 == n).map(|r| r.1.grand_mean).ok_or(format!("no result for {n}"))
    };
    let dt = get("dt")?;
    let norm = |n: &str| get(n).map(|v| v / dt);
    let (full, no_seqra, no_stepra, no_both) = (norm("full")?, norm("no-seqra")?, norm("no-stepra")?, norm("no-stepra-adascale")?);
    let msg = format!(
        "DT-normalized: full {full:.3}, no-seqra {no_seqra:.3}, no-stepra {no_stepra:.3}, no-stepra-adascale {no_both:.3}"
    );
    if full <= no_seqra && full <= no_stepra && no_stepra <= no_both {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rtg_trace(results: &[(String, VariantResult)]) -> Check {
    let get = |n: &str| -> Result<f64, String> {
        results.iter().find(|r| r.0 == n).map(|r| r.1.top_final_rtg).ok_or(format!("no result for {n}"))
    };
    let (radt, dt) = (get("full")?, get("dt")?);
    let msg = format!("mean |final rtg| at the top target: RADT {radt:.3} vs DT {dt:.3}");
    if radt < dt {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ----------------------------------------------------------- reproducibility

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(root: &Path) -> Check {
    let config = "[run]\nenv = linewalk\ndataset = ../data/dataset.jsonl\nseed = 2\n\
                  [model]\nn_layers = 1\nd_model = 16\ncontext_length = 4\n\
                  [train]\nsteps = 40\nbatch_size = 8\nwarmup_steps = 5\neval_every = 20\n\
                  [eval]\nepisodes = 2\nseeds = 0,1\n";
    let mut total = 0;
    let mut outputs = Vec::new();
    for rep in ["a", "b"] {
        let dir = root.join(rep);
        let d = |s: &str| dir.join(s).to_str().unwrap().to_string();
        std::fs::create_dir_all(dir.join("cfg")).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("cfg/run.ini"), config).map_err(|e| e.to_string())?;
        radt_lab(&["gen-data", "--env", "linewalk", "--n-traj", "40", "--seed", "7", "--out", &d("data")])?;
        radt_lab(&["gen-data", "--env", "gridcollect", "--n-traj", "30", "--seed", "7", "--out", &d("grid")])?;
        radt_lab(&["train", "--config", &d("cfg/run.ini"), "--out", &d("train")])?;
        let ck = d("train/checkpoint.bin");
        let ds = d("data/dataset.jsonl");
        radt_lab(&["eval", "--checkpoint", &ck, "--dataset", &ds, "--episodes", "2", "--seeds", "1,2", "--out", &d("eval")])?;
        radt_lab(&["probe", "--checkpoint", &ck, "--mode", "attention", "--dataset", &ds, "--episodes", "1", "--out", &d("probe")])?;
        radt_lab(&["probe", "--checkpoint", &ck, "--mode", "rtg-trace", "--dataset", &ds, "--episodes", "1", "--out", &d("probe")])?;
        radt_lab(&["ablate", "--config", &d("cfg/run.ini"), "--variants", "full,no-adascale,dt", "--seeds", "0,1", "--jobs", "2", "--out", &d("ablate")])?;
        outputs.push(dir);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let (fa, fb) = (files(a), files(b));
    if fa != fb {
        return Err("the two invocations produced different file sets".into());
    }
    for f in &fa {
        let (x, y) = (std::fs::read(a.join(f)).map_err(|e| e.to_string())?, std::fs::read(b.join(f)).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("{} differs between invocations", f.display()));
        }
        total += 1;
    }
    Ok(format!("gen-data, train, eval, probe (both modes), ablate: {total} output files byte-identical"))
}

// --------------------------------------------------------------------- driver

// Written to the real stdout so the lines survive the test harness capture.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run_check(name: &str, f: impl FnOnce() -> Check) -> (String, Check) {
    let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
    let line = match &res {
        Ok(d) => format!("PASS  {name}: {d}"),
        Err(d) => format!("FAIL  {name}: {d}"),
    };
    report(&line);
    (name.to_string(), res)
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results = vec![
        run_check("gradient suite", gradients),
        run_check("zero-init identity", zero_init_identity),
        run_check("causality", causality),
        run_check("SeqRA mass", seqra_mass),
        run_check("StepRA locality", stepra_locality),
        run_check("return-to-go bookkeeping", bookkeeping),
        run_check("reproducibility", || reproducibility(&tmp.path().join("repro"))),
    ];
    let exp = run_experiment(&tmp.path().join("experiment"));
    results.push(run_check("alignment experiment", || exp.alignment.clone()));
    results.push(run_check("ablation ordering", || {
        exp.results.as_ref().map_err(Clone::clone).and_then(|r| ablation_ordering(r))
    }));
    results.push(run_check("rtg trace", || exp.results.as_ref().map_err(Clone::clone).and_then(|r| rtg_trace(r))));

    let failed: Vec<&str> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0.as_str()).collect();
    report(&format!("{} of {} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
