use detr_assign::experiment::overfit_preset;
use detr_assign::harness::*;
use detr_assign::metrics::UNMATCHED;
use detr_assign::refinement::RefineScheme;
use detr_assign::Error;

fn small() -> (BenchmarkConfig, TrainConfig) {
    let bench = BenchmarkConfig {
        height: 16,
        width: 16,
        channels: 4,
        train_scenes: 12,
        val_scenes: 4,
        ..BenchmarkConfig::default()
    };
    let cfg = TrainConfig {
        query_dim: 8,
        epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    (bench, cfg)
}

fn csv_bytes(out: &TrainOutcome) -> (Vec<u8>, Vec<u8>) {
    let mut a = Vec::new();
    write_epoch_csv(&mut a, &out.metrics).unwrap();
    let mut b = Vec::new();
    write_layer_ap_csv(&mut b, &out.layer_ap).unwrap();
    (a, b)
}

#[test]
fn same_seed_same_csvs() {
    let (bench, cfg) = small();
    let d1 = build_dataset(&bench, &cfg).unwrap();
    let d2 = build_dataset(&bench, &cfg).unwrap();
    assert_eq!(d1, d2);
    let a = train(&cfg, &d1.train, &d1.val).unwrap();
    let b = train(&cfg, &d2.train, &d2.val).unwrap();
    assert_eq!(csv_bytes(&a), csv_bytes(&b));
    assert_eq!(a.logs, b.logs);
}

#[test]
fn epoch_csv_layout() {
    let (bench, cfg) = small();
    let d = build_dataset(&bench, &cfg).unwrap();
    let out = train(&TrainConfig { epochs: 2, ..cfg }, &d.train, &d.val).unwrap();
    let (epochs, layers) = csv_bytes(&out);
    let text = String::from_utf8(epochs).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,loss,AP,AP50,IS,FIS");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(",,"), "first epoch has no instability: {}", lines[1]);
    let text = String::from_utf8(layers).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,layer,AP,AP50");
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn zero_learning_rate_logs_do_not_depend_on_scheme() {
    let (bench, cfg) = small();
    let base = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..cfg
    };
    let d = build_dataset(&bench, &base).unwrap();
    let lfo = train(&TrainConfig { scheme: RefineScheme::Lfo, ..base.clone() }, &d.train, &d.val).unwrap();
    let lfd = train(&TrainConfig { scheme: RefineScheme::LFD_SUM_EQUAL, ..base }, &d.train, &d.val).unwrap();
    assert_eq!(lfo.logs, lfd.logs);
    assert_eq!(lfo.model, lfd.model);
}

#[test]
fn last_layer_parameters_reach_first_layer_loss_only_under_lfd() {
    let (bench, cfg) = small();
    let d = build_dataset(&bench, &cfg).unwrap();
    let scene = d.train.iter().find(|s| !s.gts.is_empty()).unwrap();
    let shape = ModelShape::new(&cfg, bench.channels).unwrap();
    let model = DecoderModel::init(shape, 1);
    // bias of the first offset row in layer L
    let ls = shape.layer;
    let idx = (shape.layers - 1) * ls.len() + (ls.query_dim + 1) * (ls.input_dim() + 1) - 1;
    let h = 1e-4;
    let probe = |scheme: RefineScheme| {
        let c = TrainConfig { scheme, ..cfg.clone() };
        let mut up = model.clone();
        up.params[idx] += h;
        let mut down = model.clone();
        down.params[idx] -= h;
        layer_losses(&up, scene, &c).unwrap()[0] - layer_losses(&down, scene, &c).unwrap()[0]
    };
    let lfd = probe(RefineScheme::LFD_SUM_EQUAL);
    let lfo = probe(RefineScheme::Lfo);
    assert!(lfd.abs() > 1e-8, "LFD layer-1 loss did not move: {lfd}");
    assert!(lfo.abs() < 1e-10, "LFO layer-1 loss moved: {lfo}");
}

#[test]
fn csa_never_crosses_classes() {
    let (bench, cfg) = small();
    let cfg = TrainConfig { epochs: 3, ..cfg };
    let d = build_dataset(&bench, &cfg).unwrap();
    let out = train(&cfg, &d.train, &d.val).unwrap();
    let per = cfg.per_class();
    let mut matched = 0;
    for log in &out.logs {
        for rec in log.records.values() {
            rec.validate(None).unwrap();
            for (q, t) in rec.t.iter().enumerate() {
                if *t != UNMATCHED {
                    matched += 1;
                    assert_eq!(*t, (q / per) as i64, "query {q} matched class {t}");
                }
            }
        }
    }
    assert!(matched > 0);
}

#[test]
fn baseline_logs_are_consistent() {
    let (bench, cfg) = small();
    let cfg = TrainConfig {
        strategy: Strategy::Baseline,
        epochs: 2,
        ..cfg
    };
    let d = build_dataset(&bench, &cfg).unwrap();
    let out = train(&cfg, &d.train, &d.val).unwrap();
    for (log, scenes) in out.logs.iter().zip(std::iter::repeat(&d.train)) {
        for s in scenes.iter() {
            let rec = &log.records[&s.image_id];
            rec.validate(Some(s.gts.len())).unwrap();
            // every object is matched when there are more queries than objects
            let hit = rec.v.iter().filter(|v| **v != UNMATCHED).count();
            assert_eq!(hit, s.gts.len());
        }
    }
}

#[test]
fn overfit_loss_decreases_at_small_steps() {
    let (bench, cfg) = overfit_preset();
    let cfg = TrainConfig {
        learning_rate: 3e-5,
        epochs: 10,
        ..cfg
    };
    let d = build_dataset(&bench, &cfg).unwrap();
    let out = train(&cfg, &d.train, &d.train).unwrap();
    for w in out.metrics.windows(2) {
        assert!(w[1].loss <= w[0].loss, "loss rose: {:?}", out.metrics);
    }
}

#[test]
fn overfit_reaches_full_ap50() {
    let (bench, cfg) = overfit_preset();
    let d = build_dataset(&bench, &cfg).unwrap();
    assert_eq!(d.train.len(), 1);
    assert_eq!(d.train[0].gts.len(), 1);
    let out = train(&cfg, &d.train, &d.train).unwrap();
    let eval = evaluate(&out.model, &d.train, &cfg).unwrap();
    assert_eq!(eval.final_ap.ap50, 1.0);
    assert_eq!(out.metrics.last().unwrap().ap50, 1.0);
}

#[test]
fn untrained_model_scores_near_zero() {
    let bench = BenchmarkConfig::default();
    let cfg = TrainConfig::default();
    let d = build_dataset(&BenchmarkConfig { train_scenes: 0, ..bench.clone() }, &cfg).unwrap();
    let model = DecoderModel::init(ModelShape::new(&cfg, bench.channels).unwrap(), 9);
    let e1 = evaluate(&model, &d.val, &cfg).unwrap();
    let e2 = evaluate(&model, &d.val, &cfg).unwrap();
    assert_eq!(e1, e2);
    assert!(e1.final_ap.ap < 0.05, "AP {}", e1.final_ap.ap);
    assert_eq!(e1.query_vectors.len(), d.val.len() * cfg.num_queries);
}

#[test]
fn query_csv_columns() {
    let (bench, cfg) = small();
    let d = build_dataset(&bench, &cfg).unwrap();
    let model = DecoderModel::init(ModelShape::new(&cfg, bench.channels).unwrap(), 0);
    let e = evaluate(&model, &d.val, &cfg).unwrap();
    let mut buf = Vec::new();
    write_query_csv(&mut buf, &e.query_vectors).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "query_id,group_k,v0,v1,v2,v3,v4,v5,v6,v7");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 10);
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "0");
    let baseline = ModelShape::new(&TrainConfig { strategy: Strategy::Baseline, ..cfg.clone() }, 4).unwrap();
    assert_eq!(baseline.group_of(3), None);
}

#[test]
fn huge_steps_report_divergence() {
    let (bench, cfg) = small();
    let cfg = TrainConfig {
        learning_rate: 1e12,
        epochs: 5,
        ..cfg
    };
    let d = build_dataset(&bench, &cfg).unwrap();
    match train(&cfg, &d.train, &d.val) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn invalid_configs_rejected() {
    let (bench, cfg) = small();
    assert!(build_dataset(&bench, &TrainConfig { num_queries: 5, ..cfg.clone() }).is_err());
    assert!(build_dataset(&BenchmarkConfig { max_objects: 0, ..bench.clone() }, &cfg).is_err());
    let d = build_dataset(&bench, &cfg).unwrap();
    assert!(train(&cfg, &[], &d.val).is_err());
    let wrong = DecoderModel::init(ModelShape::new(&TrainConfig { query_dim: 4, ..cfg.clone() }, 4).unwrap(), 0);
    assert!(train_model(wrong, &cfg, &d.train, &d.val).is_err());
}
