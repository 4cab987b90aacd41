//! A miniature run of the whole in-process pipeline: pairs, pre-training,
//! candidates, instance scoring, record export and preference fine-tuning.

use dspo_core::caption::HistogramCaptioner;
use dspo_core::degrade::{DegradationConfig, PairedSample};
use dspo_core::denoiser::{ConditioningBundle, DenoiserConfig, DenoiserParams};
use dspo_core::metrics::BuiltinSuite;
use dspo_core::partition::{instance_weights, GridSegmenter, segment_partition};
use dspo_core::preference::{build_records, export_jsonl, generate_candidates, import_jsonl, AutoAnnotator, GenSettings, RecordContext};
use dspo_core::sampler::PromptConditioning;
use dspo_core::schedule::linear_schedule;
use dspo_core::synth::synth_scene;
use dspo_core::trainer::{clone_freeze_reference, finetune, pretrain, Checkpoint, Method, PreferenceSample, PretrainSample, TrainConfig, TrainOutputs};

const RES: usize = 16;

fn pairs() -> Vec<PairedSample<f32>> {
    (0..2)
        .map(|i| {
            let cfg = DegradationConfig { downscale: 2, seed: i, ..DegradationConfig::default() };
            PairedSample::synthesize(format!("p{i}"), &synth_scene(24, i), RES, &cfg).unwrap()
        })
        .collect()
}

#[test]
fn miniature_pipeline_runs_end_to_end() {
    let schedule = linear_schedule(20).unwrap();
    let model = DenoiserConfig { resolution: RES, base_channels: 2, embed_dim: 4, vocab_size: 8, t_max: 20, init_seed: 3 };
    let pairs = pairs();
    let cond = |p: &PairedSample<f32>| ConditioningBundle::from_lq(&p.lq, 2).unwrap().with_prompt(Some(1));

    let pre_cfg = TrainConfig { method: Method::Pretrain, learning_rate: 1e-3, max_steps: 40, t_max: 20, ..TrainConfig::default() };
    let samples: Vec<_> = pairs.iter().map(|p| PretrainSample { cond: cond(p), hq: p.hq.to_model_tensor() }).collect();
    let base = pretrain(Checkpoint::fresh(DenoiserParams::new(model).unwrap(), &pre_cfg), &samples, &schedule, &pre_cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(base.loss_history.len(), 40);
    assert!(base.params.is_finite());

    let settings = vec![GenSettings::new("a", 2, 1.0, 1.0).unwrap(), GenSettings::new("b", 4, 3.0, 1.0).unwrap(), GenSettings::new("c", 3, 0.0, 0.5).unwrap()];
    let suite = BuiltinSuite;
    let captioner = HistogramCaptioner::default();
    let annotator = AutoAnnotator { suite: &suite, captioner: &captioner, tau: 0.1 };
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let mut partitions = Vec::new();
    for p in &pairs {
        let prompts = PromptConditioning { prompt_id: Some(1), ..Default::default() };
        let cands = generate_candidates(&base.params, &schedule, &p.id, &p.lq, &settings, &prompts, 7).unwrap();
        let part = segment_partition(&p.lq.bicubic_upsample(2).unwrap(), &GridSegmenter { tiles_x: 2, tiles_y: 2 }).unwrap();
        let outcomes = annotator.outcomes(&cands, &p.hq, &part, &instance_weights(&part)).unwrap();
        assert_eq!(outcomes.len(), 4);
        let paths: Vec<String> = cands.labels().iter().map(|l| format!("{}/{l}.png", p.id)).collect();
        let ctx = RecordContext { lq_id: &p.id, mask_path: "mask.png", candidate_paths: &paths, candidate_labels: &cands.labels() };
        let recs = build_records(&ctx, &outcomes).unwrap();
        for r in &recs {
            let w = cands.labels().iter().position(|l| *l == r.settings.winner).unwrap();
            let l = cands.labels().iter().position(|l| *l == r.settings.loser).unwrap();
            partitions.push((cands.candidates[w].image.to_model_tensor(), cands.candidates[l].image.to_model_tensor(), part.mask(r.instance_id), cond(p)));
        }
        records.extend(recs);
    }
    assert!(!records.is_empty());
    let path = dir.path().join("prefs.jsonl");
    export_jsonl(&records, &path).unwrap();
    assert_eq!(import_jsonl(&path).unwrap(), records);

    let train: Vec<PreferenceSample<f32>> = records
        .iter()
        .zip(partitions)
        .map(|(r, (w, l, mask, cond))| PreferenceSample {
            cond: cond.with_negative(r.negative_prompt.as_ref().map(|_| 2)),
            winner: w,
            loser: Some(l),
            mask: Some(mask),
            weight: r.weight as f32,
            negative_prompt: r.negative_prompt.clone(),
        })
        .collect();
    let reference = clone_freeze_reference(&base.params);
    for method in [Method::Dspo, Method::DiffusionDpo, Method::Sft] {
        let cfg = TrainConfig { method, max_steps: 3, t_max: 20, ..TrainConfig::default() };
        let done = finetune(Checkpoint::fresh(base.params.clone(), &cfg), &reference, &train, &schedule, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(done.step, 3);
        let step0 = done.loss_history[0];
        if method == Method::Sft {
            assert!(step0 >= 0.0);
        } else {
            assert!((step0 - std::f64::consts::LN_2).abs() < 1e-6, "{method:?}: {step0}");
        }
        assert_eq!(reference.params(), &base.params);
    }
}
