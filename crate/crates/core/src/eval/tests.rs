use super::*;
use crate::data::{generate_dataset, GenerateOptions, PolicyMix};
use crate::envs::{track_speed, EnvId};
use crate::model::RadtConfig;

/// Plays the same action everywhere.
struct Constant(Action);

impl Policy for Constant {
    fn context_length(&self) -> usize {
        3
    }

    fn act(&self, batch: &Batch) -> Result<Vec<Action>> {
        Ok(vec![self.0.clone(); batch.size])
    }
}

/// Linewalk controller that cruises at `R̂ / remaining steps`.
struct Oracle;

impl Policy for Oracle {
    fn context_length(&self) -> usize {
        2
    }

    fn act(&self, batch: &Batch) -> Result<Vec<Action>> {
        let k = batch.k;
        Ok((0..batch.size)
            .map(|b| {
                let slot = b * k + k - 1;
                let remaining = (envs::LINEWALK_HORIZON - batch.timesteps[slot]) as f64;
                let velocity = batch.states[slot * 2 + 1];
                let want = batch.returns_to_go[slot] / remaining;
                Action::Continuous(vec![track_speed(velocity, want)])
            })
            .collect())
    }
}

fn linewalk() -> EnvSpec {
    EnvSpec::new(EnvId::LineWalk)
}

#[test]
fn grid_from_forced_bounds() {
    let g = TargetGrid::from_bounds(0.0, 60.0).unwrap();
    assert_eq!(g.targets, vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
    let norm: Vec<f64> = g.targets.iter().map(|&t| g.normalize(t)).collect();
    let expect = [0.0, 16.7, 33.3, 50.0, 66.7, 83.3, 100.0];
    for (a, b) in norm.iter().zip(expect) {
        assert!((a - b).abs() < 0.05, "{a} vs {b}");
    }
    assert_eq!(norm[0], 0.0);
    assert_eq!(norm[6], 100.0);
    assert!(TargetGrid::from_bounds(3.0, 3.0).is_err());
}

#[test]
fn grid_matches_quantile_oracle_on_a_dataset() {
    let d = generate_dataset(EnvId::LineWalk, &PolicyMix::default_for(EnvId::LineWalk), 57, 3, GenerateOptions::default()).unwrap();
    let mut r = d.returns();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // numpy-style linear quantile: index h = (n − 1)·q
    let q = |p: f64| {
        let h = (r.len() - 1) as f64 * p;
        let i = h as usize;
        r[i] + (h - i as f64) * (r[(i + 1).min(r.len() - 1)] - r[i])
    };
    let g = build_target_grid(&d).unwrap();
    assert_eq!((g.lo, g.hi), (q(0.05), q(0.95)));
    for (i, t) in g.targets.iter().enumerate() {
        let want = q(0.05) + i as f64 * (q(0.95) - q(0.05)) / 6.0;
        assert!((t - want).abs() <= envs::REWARD_QUANTUM);
    }
    assert!(g.targets.windows(2).all(|w| w[0] < w[1]));

    let mut small = d.clone();
    small.trajectories.truncate(19);
    assert!(build_target_grid(&small).is_err());
}

fn check_bookkeeping(e: &EpisodeRecord) {
    let mut received = 0.0;
    for s in &e.steps {
        assert_eq!(s.rtg.to_bits(), (e.target_return - received).to_bits());
        received += s.reward;
    }
    assert_eq!(e.final_rtg().to_bits(), (e.target_return - e.actual_return).to_bits());
}

#[test]
fn untrained_model_rollouts_keep_exact_books() {
    let spec = linewalk();
    let model = Model::new(RadtConfig::for_env(&spec, Variant::Radt), 30.0, 0).unwrap();
    let a = rollout(&model, &spec, 20.0, 5).unwrap();
    let b = rollout(&model, &spec, 20.0, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.steps[0].rtg, 20.0);
    assert_eq!(a.steps.len(), spec.horizon);
    check_bookkeeping(&a);
    // negative returns-to-go are fed unchanged
    let c = rollout(&model, &spec, 0.0, 5).unwrap();
    check_bookkeeping(&c);
    assert!(c.final_rtg() <= 0.0);
}

#[test]
fn oracle_controller_has_zero_alignment_error() {
    let spec = linewalk();
    let grid = TargetGrid::from_bounds(5.0, 30.0).unwrap();
    let (report, episodes) = alignment_eval(&Oracle, "oracle", &spec, &grid, 2, &[1, 2]).unwrap();
    for e in &episodes {
        check_bookkeeping(e);
    }
    assert!(report.rows.iter().all(|r| r.abs_err_norm == 0.0), "{:?}", report.per_target);
    assert_eq!(report.grand_mean, 0.0);
    let trace = rtg_trace(&episodes);
    for p in trace.iter().filter(|p| p.step == spec.horizon) {
        assert_eq!(p.mean, 0.0);
    }
}

#[test]
fn normalized_error_example() {
    let g = TargetGrid::from_bounds(0.0, 60.0).unwrap();
    assert_eq!(g.normalized_error(20.0, 26.0), 10.0);
}

#[test]
fn report_aggregates() {
    let spec = linewalk();
    let grid = TargetGrid::from_bounds(5.0, 30.0).unwrap();
    let policy = Constant(Action::Continuous(vec![0.3]));
    let (report, _) = alignment_eval(&policy, "c", &spec, &grid, 2, &[0, 1, 2]).unwrap();
    assert_eq!(report.per_target.len(), 7);
    assert_eq!(report.rows.len(), 7 * 2 * 3);
    let means: Vec<f64> = report.per_target.iter().map(|t| t.mean).collect();
    assert!((report.grand_mean - mean(&means)).abs() < 1e-12);
    assert_eq!(report.per_seed.len(), 3);
    // constant play ignores the target, so the error is the target gap
    let actual = report.rows[0].actual;
    for t in &report.per_target {
        assert!((t.mean - grid.normalized_error(t.target, actual)).abs() < 1e-9);
    }
    let (again, _) = alignment_eval(&policy, "c", &spec, &grid, 2, &[0, 1, 2]).unwrap();
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
    assert!(report.csv().starts_with(ALIGNMENT_HEADER));
}

#[test]
fn stderr_over_seeds() {
    assert_eq!(stderr(&[3.0]), 0.0);
    assert!((stderr(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn trace_starts_at_target_and_tracks_rewards() {
    let spec = linewalk();
    let policy = Constant(Action::Continuous(vec![0.5]));
    let eps = rollout_many(
        &policy,
        &spec,
        &[
            EpisodeSpec { target_return: 12.0, seed: 0 },
            EpisodeSpec { target_return: 12.0, seed: 1 },
            EpisodeSpec { target_return: 20.0, seed: 2 },
        ],
    )
    .unwrap();
    let trace = rtg_trace(&eps);
    let first: Vec<&TracePoint> = trace.iter().filter(|p| p.step == 0).collect();
    assert_eq!(first.len(), 2);
    for p in first {
        assert_eq!(p.mean, p.target);
        assert_eq!(p.stderr, 0.0);
    }
    let twelve: Vec<&TracePoint> = trace.iter().filter(|p| p.target == 12.0).collect();
    for w in twelve.windows(2) {
        assert!((w[1].mean - w[0].mean + w[0].mean_reward).abs() < 1e-12);
    }
    assert!(trace_csv(&trace).starts_with(TRACE_HEADER));
}

#[test]
fn max_return_normalization() {
    let spec = linewalk();
    let grid = TargetGrid::from_bounds(5.0, 30.0).unwrap();
    let full = max_return_eval(&Constant(Action::Continuous(vec![1.0])), &spec, &grid, 3, 0).unwrap();
    assert!((full - 100.0).abs() < 1e-12);
    let zero = max_return_eval(&Constant(Action::Continuous(vec![0.0])), &spec, &grid, 3, 0).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn attention_probe_masses() {
    let spec = linewalk();
    let mut c = RadtConfig::for_env(&spec, Variant::Radt);
    c.d_model = 16;
    c.n_heads = 2;
    c.context_length = 4;
    let radt = Model::new(c.clone(), 30.0, 1).unwrap();
    let eps = rollout_many(
        &radt,
        &spec,
        &[EpisodeSpec { target_return: 10.0, seed: 0 }, EpisodeSpec { target_return: 25.0, seed: 1 }],
    )
    .unwrap();
    for m in attention_probe(&radt, &eps).unwrap() {
        assert_eq!((m.return_mass, m.state_mass, m.action_mass), (1.0, 0.0, 0.0));
    }
    c.variant = Variant::Dt;
    let dt = Model::new(c.clone(), 30.0, 1).unwrap();
    for m in attention_probe(&dt, &eps).unwrap() {
        assert!((m.return_mass + m.state_mass + m.action_mass - 1.0).abs() < 1e-9);
        assert!(m.return_mass > 0.0 && m.state_mass > 0.0);
    }
    c.variant = Variant::Radt;
    c.use_seqra = false;
    let blind = Model::new(c, 30.0, 1).unwrap();
    assert!(attention_probe(&blind, &eps).is_err());
}

#[test]
fn charts_are_well_formed_xml() {
    let series = [
        Series { name: "a<b & c".into(), points: vec![(0.0, 1.0), (1.0, 3.0)] },
        Series { name: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] },
    ];
    let svg = svg_line_chart("t \"x\"", "x", "y", &series);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    roxmltree::Document::parse(&svg_line_chart("empty", "x", "y", &[])).unwrap();
}
