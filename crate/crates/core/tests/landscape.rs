use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::time::Instant;

use evoaug::data::generate_minishapes;
use evoaug::fitness::EvalContext;
use evoaug::landscape::*;
use evoaug::rng::substream;
use evoaug::ssl::params::{read_checkpoint, write_checkpoint, Params};
use evoaug::ssl::{run_supervised, PreparedData, SslConfig};
use ndarray::Array2;

struct Fixture {
    model: Params,
    x: Array2<f64>,
    labels: Vec<usize>,
}

fn fixture() -> Fixture {
    let (train, test) = generate_minishapes(3, 200, 100).unwrap();
    let data = PreparedData::new(train, test, &SslConfig::default());
    let ctx = EvalContext {
        downstream_epochs: 3,
        ..Default::default()
    };
    let d = run_supervised(&data, &ctx, &SslConfig::default()).unwrap();
    Fixture {
        model: downstream_checkpoint(&d),
        x: (*data.test_x).clone(),
        labels: data.test.labels.clone(),
    }
}

fn directions(model: &Params, scope: Scope) -> (Direction, Direction) {
    (
        sample_direction(model, scope, &mut substream(0, "landscape-delta", &[])),
        sample_direction(model, scope, &mut substream(0, "landscape-eta", &[])),
    )
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn checkpoint_reproduces_downstream_loss() {
    let (train, test) = generate_minishapes(3, 200, 100).unwrap();
    let data = PreparedData::new(train, test, &SslConfig::default());
    let ctx = EvalContext {
        downstream_epochs: 2,
        ..Default::default()
    };
    let d = run_supervised(&data, &ctx, &SslConfig::default()).unwrap();
    let model = downstream_checkpoint(&d);
    let direct = evoaug::ssl::head::loss(&d.head.values, &d.head.manifest, &d.test_features.view(), &data.test.labels);
    let via = model_loss(&model.values, &model.manifest, &data.test_x.view(), &data.test.labels);
    assert!((direct - via).abs() < 1e-12, "{direct} vs {via}");
}

#[test]
fn origin_is_the_unperturbed_loss() {
    let f = fixture();
    let before = f.model.clone();
    let base = model_loss(&f.model.values, &f.model.manifest, &f.x.view(), &f.labels);
    for (scope, n) in [(Scope::Head, 10), (Scope::Full, 2)] {
        let (d, e) = directions(&f.model, scope);
        let g = compute_grid(&f.model, &f.x.view(), &f.labels, &GridSpec::square(-1.0, 1.0, n), &d, &e, 1).unwrap();
        assert_eq!(g.at_origin().to_bits(), base.to_bits(), "{scope:?}");
        assert_eq!(g.center_loss.to_bits(), base.to_bits());
        assert_eq!(f.model, before, "parameters must be untouched");
        assert!(g.losses.iter().flatten().all(|v| v.is_finite()));
    }
    let single = GridSpec {
        alphas: vec![0.0],
        betas: vec![0.0],
    };
    let (d, e) = directions(&f.model, Scope::Head);
    let g = compute_grid(&f.model, &f.x.view(), &f.labels, &single, &d, &e, 1).unwrap();
    assert_eq!(g.losses, vec![vec![base]]);
}

#[test]
fn direction_rows_match_model_row_norms() {
    let f = fixture();
    for scope in [Scope::Head, Scope::Full] {
        let (d, _) = directions(&f.model, scope);
        let mut rows = 0;
        for (slot, spec) in f.model.manifest.iter().enumerate() {
            let moved = d.values[spec.range()].iter().any(|&v| v != 0.0);
            if !spec.is_matrix() {
                assert!(!moved, "{} must stay fixed", spec.name);
                continue;
            }
            let in_scope = match scope {
                Scope::Head => slot >= HEAD_START,
                Scope::Full => !(SCALER_MEAN..HEAD_START).contains(&slot),
            };
            assert_eq!(moved, in_scope, "{}", spec.name);
            if !in_scope {
                continue;
            }
            let cols = spec.shape[1];
            for r in 0..spec.shape[0] {
                let s = spec.offset + r * cols;
                let want = row_norm(&f.model.values[s..s + cols]);
                let got = row_norm(&d.values[s..s + cols]);
                assert!((want - got).abs() < 1e-6, "{} row {r}: {got} vs {want}", spec.name);
                rows += 1;
            }
        }
        assert!(rows > 0);
    }
}

#[test]
fn zero_model_row_gives_zero_direction_row() {
    let mut f = fixture();
    let spec = f.model.manifest[HEAD_START].clone();
    let cols = spec.shape[1];
    f.model.values[spec.offset + 2 * cols..spec.offset + 3 * cols].fill(0.0);
    let d = sample_direction(&f.model, Scope::Head, &mut substream(1, "d", &[]));
    assert!(d.values[spec.offset + 2 * cols..spec.offset + 3 * cols].iter().all(|&v| v == 0.0));
    assert_eq!(d.zero_rows, vec![(spec.name.clone(), 2)]);
}

#[test]
fn independent_directions_are_nearly_orthogonal() {
    // |cos| < 0.2 for Gaussian rows is near-certain only for wide rows: a
    // 32-wide row passes about 74% of the time, a 3072-wide one always
    let f = fixture();
    let a = sample_direction(&f.model, Scope::Full, &mut substream(10, "d", &[]));
    let b = sample_direction(&f.model, Scope::Full, &mut substream(11, "d", &[]));
    let (mut wide, mut wide_ok, mut all, mut all_ok) = (0, 0, 0, 0);
    for spec in f.model.manifest.iter().filter(|s| s.is_matrix()) {
        let cols = spec.shape[1];
        for r in 0..spec.shape[0] {
            let s = spec.offset + r * cols;
            let (x, y) = (&a.values[s..s + cols], &b.values[s..s + cols]);
            let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (row_norm(x) * row_norm(y));
            let ok = cos.abs() < 0.2;
            all += 1;
            all_ok += ok as usize;
            if cols >= 128 {
                wide += 1;
                wide_ok += ok as usize;
            }
        }
    }
    assert!(wide_ok as f64 >= 0.95 * wide as f64, "{wide_ok}/{wide}");
    assert!(all_ok as f64 >= 0.85 * all as f64, "{all_ok}/{all}");
}

#[test]
fn zero_directions_give_a_constant_grid() {
    let f = fixture();
    let z = Direction::zeros(&f.model);
    let g = compute_grid(&f.model, &f.x.view(), &f.labels, &GridSpec::square(-1.0, 1.0, 6), &z, &z, 1).unwrap();
    assert!(g.losses.iter().flatten().all(|v| v.to_bits() == g.center_loss.to_bits()));
}

#[test]
fn axis_matches_reloaded_checkpoints() {
    let f = fixture();
    let (d, e) = directions(&f.model, Scope::Head);
    let grid = GridSpec {
        alphas: cell_axis(-1.0, 1.0, 10),
        betas: vec![0.0],
    };
    let g = compute_grid(&f.model, &f.x.view(), &f.labels, &grid, &d, &e, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, &alpha) in grid.alphas.iter().enumerate() {
        let mut p = f.model.clone();
        for (v, dv) in p.values.iter_mut().zip(&d.values) {
            *v += alpha * dv;
        }
        let path = dir.path().join(format!("theta_{i}.ckpt"));
        write_checkpoint(&p, BufWriter::new(File::create(&path).unwrap())).unwrap();
        let back = read_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
        let want = model_loss(&back.values, &back.manifest, &f.x.view(), &f.labels);
        assert!((g.losses[i][0] - want).abs() < 1e-12, "alpha {alpha}: {} vs {want}", g.losses[i][0]);
    }
}

#[test]
fn thread_count_does_not_change_the_grid() {
    let f = fixture();
    let (d, e) = directions(&f.model, Scope::Head);
    let spec = GridSpec::square(-1.0, 1.0, 8);
    let one = compute_grid(&f.model, &f.x.view(), &f.labels, &spec, &d, &e, 1).unwrap();
    let three = compute_grid(&f.model, &f.x.view(), &f.labels, &spec, &d, &e, 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn non_finite_losses_become_infinity() {
    let f = fixture();
    let (mut d, e) = directions(&f.model, Scope::Head);
    let last = d.values.len() - 1;
    d.values[last] = f64::MAX;
    let g = compute_grid(&f.model, &f.x.view(), &f.labels, &GridSpec::square(-1.0, 1.0, 4), &d, &e, 1).unwrap();
    assert!(g.losses.iter().flatten().any(|v| *v == f64::INFINITY));
    assert!(g.losses.iter().flatten().all(|v| !v.is_nan()));
}

#[test]
fn runtime_is_linear_in_grid_size() {
    let f = fixture();
    let (d, e) = directions(&f.model, Scope::Head);
    let time = |n: usize| {
        let t = Instant::now();
        compute_grid(&f.model, &f.x.view(), &f.labels, &GridSpec::square(-1.0, 1.0, n), &d, &e, 1).unwrap();
        t.elapsed().as_secs_f64()
    };
    time(10);
    let small = time(10);
    let large = time(50);
    // 25x the points; allow generous timer noise but reject quadratic growth
    assert!(large / small < 60.0, "10x10 {small}s, 50x50 {large}s");
}

#[test]
fn csv_and_manifest() {
    let f = fixture();
    let (d, e) = directions(&f.model, Scope::Head);
    let spec = GridSpec::square(-1.0, 1.0, 4);
    let g = compute_grid(&f.model, &f.x.view(), &f.labels, &spec, &d, &e, 1).unwrap();
    let mut buf = Vec::new();
    write_grid_csv(&g, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "alpha,-1,-0.5,0,0.5");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3].split(',').nth(3).unwrap().parse::<f64>().unwrap(), g.center_loss);
    let m = LandscapeManifest {
        seed: 0,
        checkpoint_sha256: checkpoint_id(&f.model),
        eval_split: "test".into(),
        scope: Scope::Head,
        grid: spec,
        center_loss: g.center_loss,
        zero_rows: 0,
    };
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<LandscapeManifest>(&json).unwrap(), m);
    assert_eq!(m.checkpoint_sha256.len(), 64);
}
