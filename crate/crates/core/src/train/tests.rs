use super::*;
use crate::encoders::{count_trainable_params, ModelConfig};
use crate::error::Error;

fn tiny(preset: &str) -> RunConfig {
    let mut c = RunConfig::preset(preset).unwrap();
    c.model = ModelConfig { alpha: c.model.alpha, beta: c.model.beta, ..ModelConfig::toy() };
    c.corpus_size = 24;
    c.train_size = 16;
    c.batch_size = 4;
    c.epochs = 2;
    c.latent_dim = 4;
    c.lr = 1e-2;
    c
}

#[test]
fn kv_round_trip() {
    let mut c = RunConfig::preset("b3").unwrap();
    c.lr = 1.5e-3;
    c.corpus_path = Some("data/c.json".into());
    let back = RunConfig::from_kv(&c.to_kv()).unwrap();
    assert_eq!(back, c);

    let parsed = RunConfig::from_kv("epochs = 3 # short\nlr = 0.5\npreset = lora\n").unwrap();
    assert_eq!((parsed.preset.as_str(), parsed.epochs, parsed.lr), ("lora", 3, 0.5));
    assert!(matches!(RunConfig::from_kv("bogus = 1"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_kv("epochs = x"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_kv("preset = nope"), Err(Error::Config(_))));
    assert!(RunConfig::from_kv("corpus_path = none").unwrap().corpus_path.is_none());
}

#[test]
fn presets_gate_components() {
    for name in PRESETS {
        let c = RunConfig::preset(name).unwrap();
        c.validate().unwrap();
        assert_eq!(c.needs_pseudo_captions(), c.image_align_active() || c.distill_active());
    }
    let b3 = RunConfig::preset("b3").unwrap();
    assert!(!b3.image_align_active() && b3.distill_active());
    assert_eq!(b3.architecture(), RunConfig::preset("b1").unwrap().architecture());

    let mut c = RunConfig::preset("lora").unwrap();
    c.distill = true;
    c.model.beta = 1.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn preset_counts_at_clip_scale() {
    let count = |name: &str| {
        let c = RunConfig::preset(name).unwrap();
        count_trainable_params(&ModelConfig::clip_b32(), c.flags())
    };
    assert_eq!(count("lora"), 491_520);
    assert_eq!(count("b1"), 540_672);
    assert_eq!(count("b3"), 540_672);
    assert_eq!(count("full"), 557_056);
}

#[test]
fn zero_weights_reproduce_b1_exactly() {
    let mut full = tiny("full");
    full.model.alpha = 0.0;
    full.model.beta = 0.0;
    let (tr, te) = prepare_corpus(&full).unwrap();
    let a = train(&full, &tr, &te).unwrap();
    let b = train(&tiny("b1"), &tr, &te).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let c = tiny("full");
    let (tr, te) = prepare_corpus(&c).unwrap();
    let a = train(&c, &tr, &te).unwrap();
    let b = train(&c, &tr, &te).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.steps, 8);
    assert_eq!(a.trace[0].lr, c.lr);
    assert!(a.trace.iter().all(|r| r.loss.image_align > 0.0 && r.loss.distill >= 0.0));
    let first = a.trace[0].loss.total;
    let last = a.trace.last().unwrap().loss.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_restores_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny("full");
    c.out_dir = dir.path().join("run");
    let (out, record) = run_training(&c).unwrap();
    let csv = std::fs::read_to_string(c.out_dir.join(TRACE_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some(TRACE_HEADER));
    assert_eq!(csv.lines().count(), out.trace.len() + 1);
    assert_eq!(record.trainable_params, out.model.adaptation_param_count());

    let ck = Checkpoint::load(&c.out_dir.join(CHECKPOINT_FILE)).unwrap();
    let (_, te) = prepare_corpus(&c).unwrap();
    let (t2v, v2t) = run_evaluation(&ck, &te, Postprocess::None).unwrap();
    assert_eq!((t2v, v2t), (out.t2v, out.v2t));

    // zero further steps from the restored model change nothing
    let model = ck.restore().unwrap();
    let before = evaluate(&model, &te, Postprocess::None, 1.0).unwrap();
    assert_eq!(before, (out.t2v, out.v2t));

    let mut tampered = ck.clone();
    tampered.config.model.rank += 1;
    assert!(matches!(tampered.restore(), Err(Error::Compatibility(_))));
    let mut renamed = ck.clone();
    renamed.params[0].name = "nope".into();
    assert!(matches!(renamed.restore(), Err(Error::Compatibility(_))));
    let other = crate::data::generate_synthetic_corpus(&RunConfig::desk().synthetic_params(), &ModelConfig::desk()).unwrap();
    assert!(matches!(run_evaluation(&ck, &other, Postprocess::None), Err(Error::Compatibility(_))));
}

#[test]
fn frozen_start_matches_backbone() {
    let c = tiny("full");
    let (_, te) = prepare_corpus(&c).unwrap();
    let model = build_model(&c).unwrap();
    let sim = corpus_similarity(&model, &te).unwrap();

    let batch = crate::data::Batch::assemble(&te, &(0..te.len()).collect::<Vec<_>>()).unwrap();
    let mut g = crate::numerics::Graph::new();
    let v = model.encode_video_graph(&mut g, crate::encoders::Mode::Backbone, &batch.frames).unwrap();
    let t = model.encode_text_graph(&mut g, crate::encoders::Mode::Backbone, &batch.captions, 1).unwrap();
    let s = crate::alignment::similarity_graph(&mut g, t, v.v_vid).unwrap();
    assert_eq!(&sim.values, g.value(s));
}

#[test]
fn dsl_evaluation_covers_every_query() {
    let c = tiny("lora");
    let (_, te) = prepare_corpus(&c).unwrap();
    let model = build_model(&c).unwrap();
    let (t2v, v2t) = evaluate(&model, &te, Postprocess::Dsl, 1.0).unwrap();
    assert_eq!((t2v.queries, v2t.queries), (te.len(), te.len()));
}

#[test]
fn blown_up_learning_rate_reports_divergence() {
    let mut c = tiny("full");
    c.lr = 1e300;
    let (tr, te) = prepare_corpus(&c).unwrap();
    match train(&c, &tr, &te) {
        Err(Error::Divergence { step, last_finite_step, .. }) => {
            assert!(step >= 1);
            assert_eq!(last_finite_step, Some(step - 1));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn ablation_table_lists_presets() {
    let table = run_ablation(&tiny("full"), &["lora", "b1"], 5).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.row("b1").unwrap().trainable_params, count_trainable_params(&ModelConfig::toy(), RunConfig::preset("b1").unwrap().flags()));
    let text = table.render();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("lora"));
    assert!(run_ablation(&tiny("full"), &[], 5).is_err());
}

#[test]
fn full_preset_reports_every_component() {
    let c = RunConfig::preset("full").unwrap();
    assert_eq!(c.flags(), crate::encoders::ComponentFlags::ALL);
    let model = build_model(&c).unwrap();
    assert_eq!(model.adaptation_param_count(), count_trainable_params(&c.model, crate::encoders::ComponentFlags::ALL));
}

#[test]
fn metrics_ignore_corpus_order() {
    let c = tiny("full");
    let (tr, te) = prepare_corpus(&c).unwrap();
    let out = train(&c, &tr, &te).unwrap();
    let mut reversed = te.clone();
    reversed.records.reverse();
    assert_eq!(evaluate(&out.model, &reversed, Postprocess::None, 1.0).unwrap(), (out.t2v, out.v2t));
}
