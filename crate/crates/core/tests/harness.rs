mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::tiny_config;
use hib::baselines::VariantKind;
use hib::envs::Tier;
use hib::error::HibError;
use hib::harness::{
    bands, build_learner, canonical_correlations, compare, curve_svg, emit_plot, evaluate, export_latents, make_env, pca_2d, probe,
    read_eval_series, run_experiment, EvalReport, EvalSeries, ExperimentConfig, LatentTable, PlotKind, RunDir, RunOptions, TierStats,
};
use numcore::RngStream;

fn run(cfg: &ExperimentConfig, root: &Path) -> RunDir {
    run_experiment(cfg, root, RunOptions::default()).unwrap().dir
}

fn ckpt_files(dir: &RunDir) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.ckpt_dir()).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn lines(p: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn zero_budget_writes_initial_checkpoint_and_random_policy_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(VariantKind::Hib, 0);
    let dir = run(&cfg, tmp.path());
    assert_eq!(ckpt_files(&dir), vec![dir.ckpt(0)]);
    let recs = lines(&dir.metrics());
    assert_eq!(recs.len(), 1);
    assert_eq!((recs[0]["kind"].as_str(), recs[0]["step"].as_u64()), (Some("eval"), Some(0)));
    let rep = dir.read_final_report().unwrap();
    assert_eq!(rep.step, 0);
    assert_eq!(rep.tiers.iter().map(|t| t.tier).collect::<Vec<_>>(), Tier::ALL.to_vec());
    assert!(rep.tiers.iter().all(|t| t.returns.len() == 2 && t.mean.is_finite() && t.mean <= 0.0));
    let snap = ExperimentConfig::load(&dir.config()).unwrap();
    assert_eq!(snap, cfg);
    assert_eq!(dir.root.file_name().unwrap().to_str().unwrap(), cfg.run_id());
}

#[test]
fn invalid_config_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(VariantKind::Hib, 10);
    cfg.hib.tau = 2.0;
    assert!(run_experiment(&cfg, tmp.path(), RunOptions::default()).is_err());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn identical_config_gives_identical_bytes() {
    for kind in [VariantKind::Hib, VariantKind::Dropper, VariantKind::Teacher] {
        let cfg = tiny_config(kind, 120);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (da, db) = (run(&cfg, a.path()), run(&cfg, b.path()));
        for (x, y) in [(da.metrics(), db.metrics()), (da.final_report(), db.final_report()), (da.config(), db.config())] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{kind}");
        }
        let (ca, cb) = (ckpt_files(&da), ckpt_files(&db));
        assert_eq!(ca.len(), 2);
        for (x, y) in ca.iter().zip(&cb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        // A different seed changes the stream.
        let c = tempfile::tempdir().unwrap();
        let dc = run(&cfg.with_seed(1), c.path());
        assert_ne!(fs::read(da.metrics()).unwrap(), fs::read(dc.metrics()).unwrap());
    }
}

#[test]
fn config_hash_appears_in_every_text_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(VariantKind::Hib, 60);
    let dir = run(&cfg, tmp.path());
    let h = cfg.hash();
    assert_eq!(h.len(), 16);
    for rec in lines(&dir.metrics()) {
        assert_eq!(rec["config_hash"].as_str(), Some(h.as_str()));
    }
    assert_eq!(dir.read_final_report().unwrap().config_hash, h);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.manifest()).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str(), Some(h.as_str()));
    assert!(fs::read_to_string(dir.config()).unwrap().starts_with(&format!("# config_hash={h}\n")));
    assert_eq!(ExperimentConfig::load(&dir.config()).unwrap().hash(), h);
    let svg = emit_plot(&[dir.metrics()], PlotKind::Curve, Tier::Ordinary).unwrap();
    assert!(svg.contains(&format!("config_hash={h}")));
    let table = export_latents(&cfg, &dir.ckpt(60), 2, Tier::Ordinary).unwrap();
    assert!(table.to_csv(&h).starts_with(&format!("# config_hash={h}\n")));
}

#[test]
fn checkpoint_round_trips_bitwise_and_reproduces_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(VariantKind::Hib, 80);
    let dir = run(&cfg, tmp.path());
    let (step, ckpt) = dir.latest_ckpt().unwrap();
    assert_eq!(step, 80);

    let mut env = make_env(&cfg).unwrap();
    let mut agent = build_learner(&cfg, env.as_ref()).unwrap();
    agent.store_mut().load(&ckpt).unwrap();
    let again = tmp.path().join("again.hibckpt");
    agent.store().save(&again).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let rep = dir.read_final_report().unwrap();
    for t in Tier::ALL {
        let s = evaluate(agent.as_mut(), env.as_mut(), t, cfg.budget.eval_episodes, cfg.env.k, cfg.seed).unwrap();
        assert_eq!(&s, rep.tier(t).unwrap(), "{t}");
    }
}

#[test]
fn evaluation_leaves_agent_untouched_and_is_repeatable() {
    let cfg = tiny_config(VariantKind::Hib, 0);
    let mut env = make_env(&cfg).unwrap();
    let mut agent = build_learner(&cfg, env.as_ref()).unwrap();
    let before = agent.store().clone();
    let a = evaluate(agent.as_mut(), env.as_mut(), Tier::Ood, 3, cfg.env.k, 5).unwrap();
    let b = evaluate(agent.as_mut(), env.as_mut(), Tier::Ood, 3, cfg.env.k, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(agent.store(), &before);
}

#[test]
fn resume_continues_from_latest_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(VariantKind::Dr, 120);
    cfg.budget.eval_interval = 60;
    let dir = run(&cfg, tmp.path());
    let full = fs::read_to_string(dir.metrics()).unwrap();

    // Simulate a crash after the step-60 checkpoint.
    fs::remove_file(dir.ckpt(120)).unwrap();
    fs::remove_file(dir.final_report()).unwrap();
    let o = run_experiment(&cfg, tmp.path(), RunOptions { resume: true, verbose: false }).unwrap();
    assert_eq!(o.report.step, 120);
    assert!(dir.ckpt(120).is_file());
    let resumed = fs::read_to_string(dir.metrics()).unwrap();
    let prefix: Vec<&str> = full.lines().take_while(|l| !l.contains("\"step\":80")).collect();
    assert!(resumed.starts_with(&(prefix.join("\n") + "\n")));
    // No step appears twice.
    let steps: Vec<(String, u64)> = lines(&dir.metrics()).iter().map(|r| (r["kind"].to_string(), r["step"].as_u64().unwrap())).collect();
    let mut dedup = steps.clone();
    dedup.dedup();
    assert_eq!(steps, dedup);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.manifest()).unwrap()).unwrap();
    assert_eq!(manifest["resumed_from"].as_u64(), Some(60));
}

#[test]
fn pca_of_constant_latents_is_zero() {
    let rows = vec![vec![0.3, -1.0, 2.0]; 10];
    assert!(pca_2d(&rows).iter().all(|p| p == &[0.0, 0.0]));
}

#[test]
fn pca_recovers_dominant_axis() {
    let mut rng = RngStream::new(0);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let a = rng.normal() * 5.0;
            let b = rng.normal() * 0.1;
            vec![a + b, a - b, 0.0]
        })
        .collect();
    let p = pca_2d(&rows);
    // The first component carries nearly all the variance.
    let var = |i: usize| p.iter().map(|v| v[i] * v[i]).sum::<f64>();
    assert!(var(0) > 100.0 * var(1));
}

fn rotation(rng: &mut RngStream, d: usize) -> nalgebra::DMatrix<f64> {
    let m = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
    m.qr().q()
}

#[test]
fn canonical_correlation_of_rotated_privilege_is_one() {
    let mut rng = RngStream::new(1);
    let q = rotation(&mut rng, 4);
    let sp: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let z: Vec<Vec<f64>> = sp.iter().map(|s| (q.clone() * nalgebra::DVector::from_column_slice(s)).iter().copied().collect()).collect();
    let cc = canonical_correlations(&z, &sp).unwrap();
    assert_eq!(cc.len(), 4);
    for c in cc {
        assert!((c - 1.0).abs() < 1e-9, "{c}");
    }
    let noise: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    assert!(canonical_correlations(&noise, &sp).unwrap()[0] < 0.5);
}

#[test]
fn probe_recovers_linear_target_and_splits_by_episode() {
    let mut rng = RngStream::new(2);
    let (mut episode, mut z, mut sp) = (vec![], vec![], vec![]);
    for e in 0..10 {
        let g = rng.uniform(-2.0, 2.0);
        for _ in 0..30 {
            episode.push(e);
            z.push(vec![0.5 * g + 0.01 * rng.normal(), rng.normal()]);
            sp.push(vec![0.0, g]);
        }
    }
    let pca = pca_2d(&z);
    let table = LatentTable { episode, z, sp, pca };
    let r = probe(&table, 1, 0.2).unwrap();
    assert_eq!((r.train_rows, r.test_rows), (240, 60));
    assert!(r.r2 > 0.99 && r.pearson > 0.99);
    assert!(probe(&table, 2, 0.2).is_err());
}

#[test]
fn latents_csv_round_trips_and_reports_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let z = vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![1.0 / 3.0, 5e-17]];
    let table = LatentTable { episode: vec![0, 0, 1], pca: pca_2d(&z), z, sp: vec![vec![1.0], vec![1.0], vec![-0.5]] };
    let p = tmp.path().join("latents.csv");
    fs::write(&p, table.to_csv("abc")).unwrap();
    let back = LatentTable::read_csv(&p).unwrap();
    assert_eq!(back, table);
    let header = fs::read_to_string(&p).unwrap().lines().nth(1).unwrap().to_string();
    assert_eq!(header, "episode,z_0,z_1,sp_0,pca_x,pca_y");

    fs::write(&p, table.to_csv("abc") + "2,0.1,oops,1,0,0\n").unwrap();
    match LatentTable::read_csv(&p) {
        Err(HibError::Malformed { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
}

fn fake_metrics(root: &Path, name: &str, evals: &[(u64, f64)]) -> PathBuf {
    let d = root.join(name);
    fs::create_dir_all(&d).unwrap();
    let mut s = String::new();
    for &(step, m) in evals {
        s.push_str(&format!("{{\"kind\":\"train\",\"step\":{step},\"config_hash\":\"h\"}}\n"));
        s.push_str(&format!(
            "{{\"kind\":\"eval\",\"step\":{step},\"config_hash\":\"h\",\"tiers\":[{{\"tier\":\"ordinary\",\"mean\":{m},\"std\":0.0}}]}}\n"
        ));
    }
    let p = d.join("metrics.jsonl");
    fs::write(&p, s).unwrap();
    p
}

#[test]
fn single_point_series_is_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let m = fake_metrics(tmp.path(), "hib-s0-h", &[(0, -100.0)]);
    let svg = emit_plot(&[m], PlotKind::Curve, Tier::Ordinary).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
    assert!(!svg.contains("class=\"band\"") && !svg.contains("class=\"mean\""));
}

#[test]
fn three_seeds_give_mean_line_and_band() {
    let tmp = tempfile::tempdir().unwrap();
    let files: Vec<PathBuf> = (0..3)
        .map(|s| fake_metrics(tmp.path(), &format!("hib-s{s}-h"), &[(0, -300.0 - s as f64), (100, -200.0 + 10.0 * s as f64)]))
        .collect();
    let series: Vec<EvalSeries> = files.iter().map(|f| read_eval_series(f, Tier::Ordinary).unwrap()).collect();
    let b = bands(&series);
    assert_eq!(b.len(), 1);
    assert_eq!((b[0].seeds, b[0].label.as_str()), (3, "hib"));
    assert_eq!(b[0].mean, vec![-301.0, -190.0]);
    assert_eq!((b[0].min.clone(), b[0].max.clone()), (vec![-302.0, -200.0], vec![-300.0, -180.0]));
    let svg = curve_svg(&b, "t").unwrap();
    assert_eq!(svg.matches("class=\"band\"").count(), 1);
    assert_eq!(svg.matches("class=\"mean\"").count(), 1);
    let again = emit_plot(&files, PlotKind::Curve, Tier::Ordinary).unwrap();
    assert_eq!(again, emit_plot(&files, PlotKind::Curve, Tier::Ordinary).unwrap());
    let bar = emit_plot(&files, PlotKind::Bar, Tier::Ordinary).unwrap();
    assert_eq!(bar, emit_plot(&files, PlotKind::Bar, Tier::Ordinary).unwrap());
}

#[test]
fn malformed_metrics_line_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let m = fake_metrics(tmp.path(), "dr-s0-h", &[(0, -1.0), (10, -2.0)]);
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str("{\"kind\":\"eval\",\"step\":20\n");
    fs::write(&m, text).unwrap();
    match emit_plot(&[m], PlotKind::Curve, Tier::Ordinary) {
        Err(HibError::Malformed { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
    assert!(emit_plot(&[], PlotKind::Curve, Tier::Ordinary).is_err());
}

fn fake_run(root: &Path, kind: VariantKind, seed: u64, offset: f64) {
    let dir = RunDir::new(root.join(format!("{}-s{seed}-fake", kind.name())));
    fs::create_dir_all(dir.reports()).unwrap();
    let tiers = Tier::ALL.iter().enumerate().map(|(i, &t)| TierStats::from_returns(t, vec![offset - 100.0 * i as f64, offset - 100.0 * i as f64 - 10.0])).collect();
    let rep = EvalReport { variant: kind.name().into(), seed, step: 100, config_hash: format!("h{seed}"), tiers };
    fs::write(dir.final_report(), serde_json::to_string(&rep).unwrap() + "\n").unwrap();
}

#[test]
fn compare_grid_has_table_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let five = [VariantKind::Dropper, VariantKind::Student, VariantKind::Dr, VariantKind::Hib, VariantKind::Teacher];
    for (i, k) in five.iter().enumerate() {
        for seed in 0..2 {
            fake_run(tmp.path(), *k, seed, -10.0 * i as f64 - seed as f64);
        }
    }
    let g = compare(&[tmp.path().to_path_buf()], &Tier::ALL).unwrap();
    assert_eq!(g.shape(), (3, 5));
    assert_eq!(g.variants, vec![VariantKind::Teacher, VariantKind::Hib, VariantKind::Dr, VariantKind::Student, VariantKind::Dropper]);
    let c = g.cell(Tier::Ood, VariantKind::Dr).unwrap();
    // Pooled over two seeds of two episodes each: -120, -130, -121, -131.
    assert_eq!((c.seeds, c.episodes), (2, 4));
    assert!((c.mean + 125.5).abs() < 1e-12);
    assert!((c.std - (0.25f64 * (5.5f64.powi(2) * 2.0 + 4.5f64.powi(2) * 2.0)).sqrt()).abs() < 1e-12);
    let md = g.to_markdown();
    assert_eq!(md.lines().count(), 5);
    assert!(md.lines().next().unwrap().contains("Teacher"));

    let two = compare(&[tmp.path().join("hib-s0-fake"), tmp.path().join("dr-s1-fake")], &[Tier::Ordinary, Tier::Ood, Tier::FarOod]).unwrap();
    assert_eq!(two.shape(), (3, 2));
    assert!(compare(&[tmp.path().join("missing")], &Tier::ALL).is_err());
}

#[test]
fn highdim_run_uses_mlp_privilege_and_exports_raw_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(VariantKind::Hib, 60);
    cfg.env.highdim = Some(hib::harness::HighDimConfig { d_p: 32, sigma: 0.01 });
    cfg.hib.privilege_mode = hib::nets::PrivilegeMode::Mlp;
    let dir = run(&cfg, tmp.path());
    let table = export_latents(&cfg, &dir.ckpt(60), 2, Tier::Ordinary).unwrap();
    assert_eq!(table.d_p(), 4);
    assert_eq!(table.d_z(), 16);
}
