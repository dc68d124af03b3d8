use std::collections::BTreeMap;

use super::*;
use crate::raster::{LinkId, SampleWindow};
use crate::recurrent::lstm_param_count;

fn row<'a>(rows: &'a [LayerRow], name: &str) -> &'a LayerRow {
    rows.iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("no row {name}"))
}

#[test]
fn capsnet_nlstm_paper_table() {
    let rows = ModelConfig::paper(Architecture::CapsnetNlstm).plan().unwrap();
    let want = [
        ("conv1", "78x70x128", 10_496),
        ("primary_caps", "18x16x128", 1_327_232),
        ("reshape", "4608x8", 0),
        ("traffic_caps", "30x16", 17_694_720),
        ("flatten", "480", 0),
        ("nlstm", "800", 9_222_400),
        ("fully_connected", "278", 222_678),
    ];
    for (name, shape, params) in want {
        let r = row(&rows, name);
        assert_eq!((r.output_label().as_str(), r.params), (shape, params), "{name}");
    }
    assert_eq!(crate::plan::total_params(&rows), 28_477_526);
}

#[test]
fn cnn_lstm_paper_table() {
    let rows = ModelConfig::paper(Architecture::CnnLstm).plan().unwrap();
    let want = [
        ("conv1+pool", "82x74x16", 160),
        ("conv2+pool", "41x37x32", 4_640),
        ("conv3+pool", "21x19x64", 18_496),
        ("conv4+pool", "11x10x128", 73_856),
        ("flatten", "14080", 0),
        ("lstm1", "800", 47_619_200),
        ("lstm2", "800", 5_123_200),
        ("fully_connected", "278", 222_678),
    ];
    for (name, shape, params) in want {
        let r = row(&rows, name);
        assert_eq!((r.output_label().as_str(), r.params), (shape, params), "{name}");
    }
    assert_eq!(
        ModelConfig::paper(Architecture::CnnLstm).param_count().unwrap(),
        53_062_230
    );
}

#[test]
fn other_paper_totals_match_formulas() {
    let fc = 800 * 278 + 278;
    let frame = 164 * 148;
    let lstm = |d: u64, h: u64| 4 * ((d + h) * h + h);
    let count = |a| ModelConfig::paper(a).param_count().unwrap();
    assert_eq!(count(Architecture::LstmStack), lstm(frame, 800) + lstm(800, 800) + fc);
    assert_eq!(count(Architecture::NlstmOnly), lstm(frame, 800) + lstm(800, 800) + fc);
    assert_eq!(
        count(Architecture::CapsnetOnly),
        10_496 + 1_327_232 + 17_694_720 + 15 * 480 * 278 + 278
    );
    assert_eq!(
        count(Architecture::Dcnn),
        160 + 4_640 + 18_496 + 73_856 + 15 * 14_080 * 278 + 278
    );
    assert_eq!(lstm_param_count(480, 800), 4 * (1280 * 800 + 800));
}

#[test]
fn desk_stores_match_plans() {
    for a in Architecture::ALL {
        let c = ModelConfig::desk(a);
        let (_, store) = Model::init::<f32>(&c, 3).unwrap();
        assert_eq!(store.count() as u64, c.param_count().unwrap(), "{a}");
    }
}

#[test]
fn architecture_tags_round_trip() {
    for a in Architecture::ALL {
        assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
    }
    assert!(matches!(
        "transformer".parse::<Architecture>(),
        Err(Error::UnknownArchitecture(_))
    ));
}

#[test]
fn invalid_configs_name_their_field() {
    let mut c = ModelConfig::desk(Architecture::CapsnetNlstm);
    c.lag = 0;
    assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.lag"));
    let mut c = ModelConfig::desk(Architecture::CnnLstm);
    c.cnn = None;
    assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.cnn"));
    let mut c = ModelConfig::desk(Architecture::Dcnn);
    c.horizons = vec![];
    assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.horizons"));
}

fn desk_window(c: &ModelConfig, seed: u64) -> SampleWindow {
    check::probe_window(c, seed).unwrap()
}

#[test]
fn desk_outputs_have_one_link_vector_per_horizon() {
    for a in Architecture::ALL {
        let mut c = ModelConfig::desk(a);
        c.horizons = vec![1, 2];
        let (m, store) = Model::init::<f32>(&c, 5).unwrap();
        let w = desk_window(&c, 5);
        let p = m.predict(&store, &w.inputs).unwrap();
        assert_eq!(p.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert!(p.values().all(|v| v.len() == 8 && v.iter().all(|x| x.is_finite())));
    }
}

#[test]
fn wrong_frame_count_is_rejected() {
    let c = ModelConfig::desk(Architecture::LstmStack);
    let (m, store) = Model::init::<f32>(&c, 1).unwrap();
    let w = desk_window(&c, 1);
    assert!(matches!(m.predict(&store, &w.inputs[1..]), Err(Error::Shape(_))));
}

fn zero_heads<T: crate::tensor::Scalar>(store: &mut ParamStore<T>, horizons: &[usize]) {
    for h in horizons {
        for part in ["w", "b"] {
            let id = store.find(&format!("head.h{h}.{part}")).unwrap();
            store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[test]
fn zero_heads_predict_zero_and_loss_is_mean_square_target() {
    let c = ModelConfig::desk(Architecture::CapsnetNlstm);
    let (m, mut store) = Model::init::<f64>(&c, 2).unwrap();
    zero_heads(&mut store, &c.horizons);
    let w = desk_window(&c, 2);
    let p = m.predict(&store, &w.inputs).unwrap();
    assert!(p.values().flatten().all(|&x| x == 0.0));

    let mut g = Graph::new();
    let params = g.bind_all(&store);
    let out = m.forward(&mut g, &params, &w.inputs, false, &mut substream(0, "t")).unwrap();
    let l = m.loss(&mut g, &out, &w.targets).unwrap();
    let ys: Vec<f64> = w.targets.values().flatten().map(|v| v / c.v_max).collect();
    let want = ys.iter().map(|y| y * y).sum::<f64>() / ys.len() as f64;
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
}

#[test]
fn loss_matches_direct_sum() {
    let c = ModelConfig::desk(Architecture::NlstmOnly);
    let (m, _) = Model::init::<f64>(&c, 0).unwrap();
    let mut rng = substream(4, "test.loss");
    use rand::Rng;
    for _ in 0..10 {
        let preds: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| rng.gen_range(-0.2..1.2)).collect()).collect();
        let targets: BTreeMap<usize, Vec<f64>> = [1, 3]
            .into_iter()
            .map(|h| (h, (0..8).map(|_| rng.gen_range(-5.0..90.0)).collect()))
            .collect();
        let mut g = Graph::new();
        let outs: Vec<Var> = preds.iter().map(|p| g.constant(Tensor::from_vec(p.clone()))).collect();
        let l = m.loss(&mut g, &outs, &targets).unwrap();
        let mut want = 0.0;
        for (p, t) in preds.iter().zip(targets.values()) {
            for (a, b) in p.iter().zip(t) {
                want += (a - b.clamp(0.0, 80.0) / 80.0).powi(2);
            }
        }
        assert!((g.value(l).data()[0] - want / 16.0).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let outs = vec![g.constant(Tensor::from_vec(vec![0.0; 8]))];
    let only_one: BTreeMap<usize, Vec<f64>> = [(1, vec![0.0; 8])].into_iter().collect();
    assert!(m.loss(&mut g, &outs, &only_one).is_err());
}

#[test]
fn composed_graph_passes_grad_check() {
    let mut c = ModelConfig::desk(Architecture::CapsnetNlstm);
    c.lag = 3;
    let r = check::composed_grad_check(&c, 1, 1e-3).unwrap();
    assert_eq!(r.coordinates as u64, c.param_count().unwrap());
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn tiny_series(periods: usize) -> Series {
    let cfg = SynthConfig {
        periods,
        ..SynthConfig::default()
    };
    Series::synthetic(&cfg, (1e-4, 1e-4), 120, 80.0, 7).unwrap().series
}

fn tiny_model() -> ModelConfig {
    let mut c = ModelConfig::desk(Architecture::LstmStack);
    c.hidden = 8;
    c.lag = 3;
    c
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let series = tiny_series(60);
    let c = tiny_model();
    let w = series.windows(c.lag, &c.horizons).unwrap();
    let run = || {
        let (m, init) = Model::init::<f32>(&c, 11).unwrap();
        train(&m, init, &w[..40], &w[40..], &quick_train(), 11).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    assert!(a.final_loss < a.initial_loss);
    let mut csv = Vec::new();
    write_history(&mut csv, &a.history).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,lr,train_loss,val_loss\n1,0.003,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn zero_epochs_keeps_initialization() {
    let series = tiny_series(30);
    let c = tiny_model();
    let w = series.windows(c.lag, &c.horizons).unwrap();
    let (m, init) = Model::init::<f32>(&c, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(&m, init.clone(), &w, &[], &cfg, 1).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, 0);
    for ((_, a), (_, b)) in out.best.iter().zip(init.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
    assert!(matches!(train(&m, init, &[], &[], &cfg, 1), Err(Error::EmptyDataset)));
}

#[test]
fn learning_rate_halves_every_twenty_epochs() {
    let s = TrainConfig::default().schedule();
    for e in 0..20 {
        assert_eq!(s.lr_at(e), 1e-3);
    }
    for e in 20..40 {
        assert_eq!(s.lr_at(e), 5e-4);
    }
}

#[test]
fn best_validation_checkpoint_is_kept() {
    let series = tiny_series(60);
    let c = tiny_model();
    let w = series.windows(c.lag, &c.horizons).unwrap();
    let (m, init) = Model::init::<f32>(&c, 2).unwrap();
    let out = train(&m, init, &w[..40], &w[40..], &quick_train(), 2).unwrap();
    let best_val = out
        .history
        .iter()
        .filter_map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    if out.best_epoch > 0 {
        assert_eq!(out.history[out.best_epoch - 1].val_loss, Some(best_val));
        let v = dataset_loss(&m, &out.best, &w[40..]).unwrap();
        assert!((v - best_val).abs() < 1e-9);
    }
}

#[test]
fn single_candidate_is_selected() {
    let series = tiny_series(40);
    let cfg = TrainConfig {
        epochs: 1,
        folds: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let rep = cross_validate(&series, &[tiny_model()], &cfg, 3).unwrap();
    assert_eq!(rep.selected, 0);
    assert_eq!(rep.candidates[0].fold_losses.len(), 2);
}

#[test]
fn dominant_candidate_is_selected() {
    let scores = vec![
        CandidateScore {
            label: "a".into(),
            fold_losses: vec![0.3, 0.4, 0.5],
            mean: 0.4,
        },
        CandidateScore {
            label: "b".into(),
            fold_losses: vec![0.2, 0.3, 0.4],
            mean: 0.3,
        },
    ];
    assert_eq!(CvReport::from_scores(scores).selected, 1);
}

#[test]
fn cross_validation_needs_enough_windows() {
    let series = tiny_series(12);
    let cfg = TrainConfig {
        folds: 20,
        ..TrainConfig::default()
    };
    assert!(matches!(
        cross_validate(&series, &[tiny_model()], &cfg, 0),
        Err(Error::TooFewSamples { .. })
    ));
}

struct Biased(f64);

impl Forecaster for Biased {
    fn name(&self) -> String {
        format!("bias{}", self.0)
    }

    fn forecast(&self, s: &SampleWindow) -> Result<BTreeMap<usize, Vec<f64>>> {
        Ok(s.targets
            .iter()
            .map(|(&h, y)| (h, y.iter().map(|v| v + self.0).collect()))
            .collect())
    }
}

#[test]
fn perfect_and_biased_forecasters() {
    let series = tiny_series(30);
    let w = series.windows(4, &[1, 3]).unwrap();
    let perfect = evaluate(&Biased(0.0), &w, &series.link_ids, 2.0).unwrap();
    assert_eq!(perfect.overall.mse, 0.0);
    assert_eq!(perfect.overall.mape_standard, 0.0);
    assert_eq!(perfect.overall.mape_paper, Some(0.0));
    assert_eq!(perfect.flagged(), 0);
    let biased = evaluate(&Biased(3.0), &w, &series.link_ids, 2.0).unwrap();
    assert_eq!(biased.flagged(), 8);
    assert!(biased.links.iter().all(|l| (l.mae - 3.0).abs() < 1e-9));
    assert!((biased.overall.mse - 9.0).abs() < 1e-9);
    assert_eq!(biased.per_horizon.len(), 2);
    let mut out = Vec::new();
    biased.write_link_report(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("link_id,mae_kmh,flagged\n"));
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",1")));
    assert!(matches!(
        evaluate(&Persistence, &[], &series.link_ids, 2.0),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn persistence_repeats_last_observation() {
    let series = tiny_series(20);
    let w = series.windows(3, &[1, 3]).unwrap();
    let f = Persistence.forecast(&w[0]).unwrap();
    assert_eq!(f[&1], series.speeds[2]);
    assert_eq!(f[&3], series.speeds[2]);
    let _ = LinkId(0);
}

#[test]
fn checkpoint_round_trip() {
    for a in [Architecture::CapsnetNlstm, Architecture::CnnLstm] {
        let c = ModelConfig::desk(a);
        let (m, store) = Model::init::<f32>(&c, 9).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &c, &store).unwrap();
        let (m2, s2) = read_model(&buf[..]).unwrap();
        assert_eq!(m2.config, c);
        let w = desk_window(&c, 9);
        assert_eq!(m.predict(&store, &w.inputs).unwrap(), m2.predict(&s2, &w.inputs).unwrap());
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    assert!(matches!(load_model(&path, None), Err(Error::MissingCheckpoint(_))));
    let c = ModelConfig::desk(Architecture::NlstmOnly);
    let (_, store) = Model::init::<f32>(&c, 0).unwrap();
    save_model(&path, &c, &store).unwrap();
    assert!(load_model(&path, Some(Architecture::NlstmOnly)).is_ok());
    assert!(matches!(
        load_model(&path, Some(Architecture::CnnLstm)),
        Err(Error::ArchitectureMismatch { .. })
    ));
    assert!(matches!(read_model(&b"junk"[..]), Err(Error::Format(_))));
}
