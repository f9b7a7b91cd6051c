use lots_core::checkpoint::{load_checkpoint, save_checkpoint};
use lots_core::diffusion::{sample, ConditionSet, LotsModel, ModelConfig, SampleOptions, TrainConfig, Trainer};
use lots_core::pair_codec::{ConditionPair, SketchMap, TextPrompt};
use lots_core::sketchy::fixture::{write_fixture, FixtureSpec};
use lots_core::sketchy::{AnnotationSet, BuildOptions, DatasetBuilder, EdgeSketcher, Manifest, Taxonomy, TemplateBackend};
use proptest::prelude::*;

#[test]
fn built_dataset_trains_and_checkpoint_samples_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("src"), dir.path().join("out"));
    write_fixture(&src, &FixtureSpec::new(vec![1, 2, 3, 2], 3)).unwrap();
    let taxonomy = Taxonomy::default();
    let ann = AnnotationSet::load(&src.join("annotations.json"), &taxonomy).unwrap();
    let report = DatasetBuilder {
        taxonomy: &taxonomy,
        describer: &TemplateBackend,
        sketcher: &EdgeSketcher { input_size: 64 },
        options: BuildOptions::default(),
    }
    .build(&ann, &src.join("images"), &out)
    .unwrap();
    assert_eq!(report.stats.images, 4);

    let manifest = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest, report.manifest);
    let cfg = ModelConfig::tiny();
    let data: Vec<_> = manifest
        .records
        .iter()
        .map(|r| r.training_sample(&out, &cfg.global_text, cfg.image_size()).unwrap())
        .collect();
    for (s, r) in data.iter().zip(&manifest.records) {
        assert_eq!(s.pairs.len(), r.garments.len());
        assert!(s.pairs.iter().all(|p| p.sketch.height() == 512 && p.sketch.width() == 512));
    }

    let mut trainer = Trainer::new(
        LotsModel::new(&cfg).unwrap(),
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let reports = trainer.fit(&data, 3).unwrap();
    assert_eq!(reports.len(), 3);
    let model = trainer.into_model();

    let ckpt = dir.path().join("m.safetensors");
    save_checkpoint(&model, &ckpt).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    let conditions = ConditionSet::new(data[2].pairs.clone()).unwrap();
    let global = TextPrompt::global(&cfg.global_text);
    let opts = SampleOptions {
        steps: 3,
        seed: 5,
        ..Default::default()
    };
    let a = sample(&model, &conditions, &global, &opts).unwrap();
    let b = sample(&restored, &conditions, &global, &opts).unwrap();
    assert_eq!(a.to_png_bytes().unwrap(), b.to_png_bytes().unwrap());
    assert_eq!(a.provenance, b.provenance);
}

fn pair_strategy() -> impl Strategy<Value = ConditionPair> {
    (prop::collection::vec(any::<bool>(), 64), "[a-z]{1,8}( [a-z]{1,8}){0,3}").prop_map(|(bits, text)| {
        let sketch = SketchMap::from_fn(8, 8, |y, x| bits[y * 8 + x]).unwrap();
        ConditionPair::new(sketch, TextPrompt::local(text).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn digest_ignores_pair_order(pairs in prop::collection::vec(pair_strategy(), 1..=6), rot in 0usize..6) {
        let mut rotated = pairs.clone();
        let k = rot % pairs.len();
        rotated.rotate_left(k);
        let global = TextPrompt::global("A full body photo of a model");
        let a = ConditionSet::new(pairs).unwrap();
        let b = ConditionSet::new(rotated).unwrap();
        prop_assert_eq!(a.digest(&global), b.digest(&global));
        prop_assert_eq!(a.canonical(), b.canonical());
    }

    #[test]
    fn pooled_rows_do_not_depend_on_other_pairs(pairs in prop::collection::vec(pair_strategy(), 2..=4)) {
        let model = LotsModel::new(&ModelConfig::tiny()).unwrap();
        let pf = model.pair_former().unwrap();
        let enc: Vec<_> = pairs.iter().map(|p| model.encode_pair(p).unwrap()).collect();
        let all = lots_core::pair_former::build_condition_tensor(&enc, pf).unwrap();
        for (i, e) in enc.iter().enumerate() {
            let alone = lots_core::pair_former::build_condition_tensor(std::slice::from_ref(e), pf).unwrap();
            let a = lots_core::nn::to_f64_vec(all.row(i).unwrap()).unwrap();
            let b = lots_core::nn::to_f64_vec(alone.row(0).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
