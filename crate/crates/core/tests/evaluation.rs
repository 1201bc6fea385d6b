use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trl_core::config::{Protocol, RunConfig};
use trl_core::data::loader::load_dataset;
use trl_core::data::synth::synth_generate;
use trl_core::eval::{
    average_reports, cmc_curve, cross_dataset_eval, evaluate, half_splits, mean_average_precision, probe_gallery, run_protocol,
    EvalReport,
};
use trl_core::pipeline::{describe_records, load_all, training_examples, train_model};
use trl_core::rng::stream;
use trl_core::Tensor;

/// Random 10x20 instance with many tied distances; every probe has at
/// least one match.
fn instance(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let gallery: Vec<usize> = (0..20).map(|_| r.gen_range(0..6)).collect();
    let probes: Vec<usize> = (0..10).map(|_| *gallery.choose(r).unwrap()).collect();
    let d = (0..10)
        .map(|_| (0..20).map(|_| r.gen_range(0..8) as f64 * 0.5).collect())
        .collect();
    (d, probes, gallery)
}

/// Rank of gallery entry `j`: one plus the entries that come before it,
/// nearer or equally near and earlier in the gallery.
fn oracle_rank(row: &[f64], j: usize) -> usize {
    1 + (0..row.len()).filter(|&i| row[i] < row[j] || (row[i] == row[j] && i < j)).count()
}

fn oracle_cmc(d: &[Vec<f64>], p: &[usize], g: &[usize], k: usize) -> f64 {
    let hits = d
        .iter()
        .zip(p)
        .filter(|(row, &id)| (0..g.len()).filter(|&j| g[j] == id).map(|j| oracle_rank(row, j)).min().unwrap() <= k)
        .count();
    hits as f64 / p.len() as f64
}

fn oracle_ap(row: &[f64], id: usize, g: &[usize]) -> f64 {
    let ranks: Vec<usize> = (0..g.len()).filter(|&j| g[j] == id).map(|j| oracle_rank(row, j)).collect();
    ranks
        .iter()
        .map(|&r| ranks.iter().filter(|&&q| q <= r).count() as f64 / r as f64)
        .sum::<f64>()
        / ranks.len() as f64
}

#[test]
fn cmc_examples() {
    // Correct matches at ranks 1, 2 and 5.
    let g = [0, 1, 2, 3, 4];
    let d = vec![
        vec![0.0, 1.0, 2.0, 3.0, 4.0],
        vec![0.0, 1.0, 2.0, 3.0, 4.0],
        vec![0.0, 1.0, 2.0, 3.0, 4.0],
    ];
    let cmc = cmc_curve(&d, &[0, 1, 4], &g, &[1, 2, 5]).unwrap();
    assert_eq!(cmc, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
}

#[test]
fn ties_keep_gallery_order() {
    let g: Vec<usize> = (0..6).collect();
    let d = vec![vec![1.0; 6]; 6];
    for (pos, &id) in g.iter().enumerate() {
        let cmc = cmc_curve(&d[..1], &[id], &g, &[1, 2, 3, 4, 5, 6]).unwrap();
        let first = cmc.iter().position(|&v| v == 1.0).unwrap() + 1;
        assert_eq!(first, pos + 1);
    }
}

#[test]
fn average_precision_examples() {
    let g = [7, 1, 7, 2];
    assert!((mean_average_precision(&[vec![0.1, 0.2, 0.3, 0.4]], &[7], &g).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(mean_average_precision(&[vec![0.1, 0.9, 0.2, 0.8]], &[7], &g).unwrap(), 1.0);
}

#[test]
fn missing_match_and_bad_ranks_are_errors() {
    let d = vec![vec![0.0, 1.0]];
    assert!(cmc_curve(&d, &[5], &[0, 1], &[1]).is_err());
    assert!(mean_average_precision(&d, &[5], &[0, 1]).is_err());
    assert!(cmc_curve(&d, &[0], &[0, 1], &[0]).is_err());
    assert!(cmc_curve(&d, &[0, 1], &[0, 1], &[1]).is_err());
}

#[test]
fn metrics_agree_with_brute_force() {
    let mut r = stream(0, "metric-oracle");
    let ranks: Vec<usize> = (1..=20).collect();
    for _ in 0..100 {
        let (d, p, g) = instance(&mut r);
        let cmc = cmc_curve(&d, &p, &g, &ranks).unwrap();
        for (&k, &v) in ranks.iter().zip(&cmc) {
            assert_eq!(v, oracle_cmc(&d, &p, &g, k));
        }
        let expected = d.iter().zip(&p).map(|(row, &id)| oracle_ap(row, id, &g)).sum::<f64>() / p.len() as f64;
        assert!((mean_average_precision(&d, &p, &g).unwrap() - expected).abs() <= 1e-12);
    }
}

#[test]
fn metrics_only_depend_on_order() {
    let mut r = stream(1, "metric-monotone");
    let ranks: Vec<usize> = (1..=20).collect();
    for _ in 0..100 {
        let (mut d, p, g) = instance(&mut r);
        for v in d.iter_mut().flatten() {
            *v += r.gen_range(-0.2..0.2);
        }
        let warped: Vec<Vec<f64>> = d.iter().map(|row| row.iter().map(|&x| x * x * x + x).collect()).collect();
        assert_eq!(cmc_curve(&d, &p, &g, &ranks).unwrap(), cmc_curve(&warped, &p, &g, &ranks).unwrap());
        assert_eq!(
            mean_average_precision(&d, &p, &g).unwrap(),
            mean_average_precision(&warped, &p, &g).unwrap()
        );
    }
}

#[test]
fn cmc_is_monotone_and_ends_at_one() {
    let mut r = stream(2, "metric-cmc");
    let ranks: Vec<usize> = (1..=20).collect();
    for _ in 0..50 {
        let (d, p, g) = instance(&mut r);
        let cmc = cmc_curve(&d, &p, &g, &ranks).unwrap();
        assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(cmc.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(cmc[19], 1.0);
    }
}

#[test]
fn removing_a_non_match_never_lowers_precision() {
    let mut r = stream(3, "metric-remove");
    for _ in 0..100 {
        let (d, p, g) = instance(&mut r);
        for (row, &id) in d.iter().zip(&p) {
            let before = mean_average_precision(std::slice::from_ref(row), &[id], &g).unwrap();
            for j in (0..g.len()).filter(|&j| g[j] != id) {
                let mut row2 = row.clone();
                let mut g2 = g.clone();
                row2.remove(j);
                g2.remove(j);
                assert!(mean_average_precision(&[row2], &[id], &g2).unwrap() >= before);
            }
        }
    }
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("id{i:04}")).collect()
}

#[test]
fn half_splits_are_disjoint_halves() {
    let ids = names(20);
    let splits = half_splits(&ids, 10, 5).unwrap();
    assert_eq!(splits.len(), 10);
    for s in &splits {
        assert_eq!((s.train.len(), s.test.len()), (10, 10));
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        let mut all: Vec<String> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
    }
    assert_eq!(splits, half_splits(&ids, 10, 5).unwrap());
    assert!(splits.windows(2).any(|w| w[0] != w[1]));
    assert!(half_splits(&names(3), 10, 5).is_err());
}

#[test]
fn averaging_is_the_arithmetic_mean() {
    let mut r = stream(4, "average");
    let reports: Vec<EvalReport> = (0..10)
        .map(|t| {
            let mut cmc: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
            cmc.sort_by(f64::total_cmp);
            EvalReport {
                protocol: Protocol::HalfSplit10,
                trial: Some(t),
                domains: None,
                ranks: vec![1, 5, 20],
                cmc,
                map: r.gen_range(0.0..1.0),
                distances: Vec::new(),
            }
        })
        .collect();
    let mean = average_reports(&reports).unwrap();
    assert_eq!(mean.trial, None);
    for i in 0..3 {
        let expected = reports.iter().map(|r| r.cmc[i]).sum::<f64>() / 10.0;
        assert!((mean.cmc[i] - expected).abs() <= 1e-12);
    }
    assert!((mean.map - reports.iter().map(|r| r.map).sum::<f64>() / 10.0).abs() <= 1e-12);
    assert!(average_reports(&[]).is_err());
}

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig::parse(&format!(
        "run.seed = {seed}
synth.identities = 20
synth.sequences_per_camera = 1
synth.frames = 6
synth.height = 16
synth.width = 16
synth.clutter = 1
synth.seed = {seed}
backbone.input_height = 16
backbone.input_width = 16
backbone.front_channels = 6
backbone.front_pool = 2
backbone.tail_channels = 8
backbone.tail_pool = 2
backbone.descriptor_dim = 8
st2n.loc_width = 6
st2n.loc_hidden = 4
trl.hidden = 6
train.stage1_iterations = 300
train.stage2_iterations = 50
train.stage1_lr = 3e-3
train.stage2_lr = 1e-3
train.batch_size = 4
train.frames = 4
eval.protocol = half10
"
    ))
    .unwrap()
}

#[test]
fn half_split_probes_come_from_the_first_camera() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(0);
    synth_generate(&cfg.synth, dir.path()).unwrap();
    let index = load_dataset(dir.path(), 1).unwrap();
    let splits = half_splits(&index.identities(), 10, 0).unwrap();
    for s in &splits {
        let (probes, gallery) = probe_gallery(&index, &s.test, Protocol::HalfSplit10).unwrap();
        assert_eq!((probes.len(), gallery.len()), (10, 10));
        assert!(probes.iter().all(|&r| index.records[r].camera == "cam1"));
        assert!(gallery.iter().all(|&r| index.records[r].camera == "cam2"));
        assert!(probes.iter().chain(&gallery).all(|&r| s.test.contains(&index.records[r].identity)));
    }
}

#[test]
fn cross_evaluation_on_the_same_domain_matches_within_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(1);
    synth_generate(&cfg.synth, dir.path()).unwrap();
    let index = load_dataset(dir.path(), 1).unwrap();
    let mut r = stream(1, "descriptors");
    let descriptors: Vec<Vec<f64>> = (0..index.len()).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let splits = half_splits(&index.identities(), 3, 1).unwrap();
    let within = run_protocol(&index, &splits, Protocol::HalfSplit10, &[1, 5], |_, _| Ok(descriptors.clone())).unwrap();
    let cross = cross_dataset_eval(&index, &splits, Protocol::HalfSplit10, &[1, 5], &descriptors, ("A".into(), "A".into())).unwrap();
    for (w, c) in within.iter().zip(&cross) {
        assert_eq!((&w.cmc, w.map, &w.distances), (&c.cmc, c.map, &c.distances));
        assert_eq!(c.domains, Some(("A".to_string(), "A".to_string())));
    }
    let mut ragged = descriptors.clone();
    ragged[3].push(0.0);
    assert!(cross_dataset_eval(&index, &splits, Protocol::HalfSplit10, &[1], &ragged, ("A".into(), "B".into())).is_err());
}

/// Small enough to train in a few seconds, large enough to rank well above
/// chance on its own domain.
fn small_run(seed: u64) -> RunConfig {
    RunConfig::parse(&format!(
        "run.seed = {seed}
synth.identities = 20
synth.sequences_per_camera = 1
synth.frames = 8
synth.height = 32
synth.width = 32
synth.clutter = 3
synth.seed = {seed}
backbone.input_height = 32
backbone.input_width = 32
backbone.front_channels = 8, 16
backbone.front_pool = 2, 2
backbone.tail_channels = 32
backbone.tail_pool = 2
backbone.descriptor_dim = 32
st2n.loc_width = 16
st2n.loc_hidden = 8
trl.hidden = 32
train.stage1_iterations = 300
train.stage2_iterations = 100
train.stage1_lr = 3e-3
train.stage2_lr = 1e-3
train.batch_size = 4
train.frames = 6
eval.protocol = half10
"
    ))
    .unwrap()
}

#[test]
fn colour_shifted_domain_does_not_beat_the_training_domain() {
    let mut not_better = 0;
    for seed in 0..10 {
        let cfg = small_run(seed);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&cfg.synth, a.path()).unwrap();
        let mut shifted = cfg.synth.clone();
        shifted.colour_mix = 0.5;
        synth_generate(&shifted, b.path()).unwrap();
        let (ia, ib) = (load_dataset(a.path(), 1).unwrap(), load_dataset(b.path(), 1).unwrap());
        let (fa, fb): (Vec<Tensor<f32>>, Vec<Tensor<f32>>) = (load_all(&ia).unwrap(), load_all(&ib).unwrap());
        let split = half_splits(&ia.identities(), 1, seed).unwrap();
        let examples = training_examples(&ia, &fa, &split[0].train).unwrap();
        let model = train_model(&cfg, &examples, split[0].train.len(), |_, _, _| {}).unwrap();
        let all: Vec<usize> = (0..ia.len()).collect();
        let within = run_protocol(&ia, &split, Protocol::HalfSplit10, &[1], |_, _| describe_records(&model, &fa, &all)).unwrap();
        let db = describe_records(&model, &fb, &all).unwrap();
        let cross = cross_dataset_eval(&ib, &split, Protocol::HalfSplit10, &[1], &db, ("A".into(), "B".into())).unwrap();
        if cross[0].cmc[0] <= within[0].cmc[0] {
            not_better += 1;
        }
    }
    assert!(not_better >= 9, "{not_better}/10");
}

#[test]
fn evaluate_labels_by_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(2);
    synth_generate(&cfg.synth, dir.path()).unwrap();
    let index = load_dataset(dir.path(), 1).unwrap();
    // Descriptor = identity number, so every probe finds its match first.
    let descriptors: Vec<Vec<f64>> = index.records.iter().map(|r| vec![r.identity[2..].parse::<f64>().unwrap()]).collect();
    let test = index.identities();
    let (p, g) = probe_gallery(&index, &test, Protocol::HalfSplit10).unwrap();
    let report = evaluate(&descriptors, &index, &p, &g, &[1], Protocol::HalfSplit10, Some(0)).unwrap();
    assert_eq!((report.cmc[0], report.map), (1.0, 1.0));
}
