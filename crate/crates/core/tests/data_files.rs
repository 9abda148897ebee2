use std::collections::BTreeMap;

use dval_core::data::{
    generate, load_dataset, read_teacher_file, sample_episodes, save_dataset, write_teacher_file, EpisodeSpec,
    GeneratorSpec, TeacherTable,
};
use dval_core::encoders::TeacherHandle;
use dval_core::train::{Model, TrainConfig, TrainData};

#[test]
fn generated_benchmark_has_pinned_shape() {
    let (train, test) = generate(&GeneratorSpec::default()).unwrap();
    assert!((590..=640).contains(&train.len()), "{}", train.len());
    assert!((390..=420).contains(&test.len()), "{}", test.len());
    let counts = train.class_counts();
    assert_eq!(counts, GeneratorSpec::default().train_counts());
    let groups = dval_core::losses::ClassStats::<f64>::from_counts(
        &counts,
        train.len(),
        &Default::default(),
        dval_core::losses::CountPolicy::Strict,
    )
    .unwrap()
    .group_sizes();
    assert_eq!(groups, [4, 4, 4]);
}

#[test]
fn dataset_survives_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = generate(&GeneratorSpec::default()).unwrap();
    save_dataset(&train, dir.path().join("train.dvds")).unwrap();
    save_dataset(&test, dir.path().join("test.dvds")).unwrap();
    assert_eq!(load_dataset(dir.path().join("train.dvds")).unwrap(), train);
    assert_eq!(load_dataset(dir.path().join("test.dvds")).unwrap(), test);

    let mut bytes = std::fs::read(dir.path().join("test.dvds")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(dir.path().join("bad.dvds"), bytes).unwrap();
    assert!(load_dataset(dir.path().join("bad.dvds")).is_err());
}

#[test]
fn teacher_file_drives_distillation_targets() {
    let dir = tempfile::tempdir().unwrap();
    let (mut train, _) = generate(&GeneratorSpec::default()).unwrap();
    train.samples.truncate(10);
    let cfg = TrainConfig::default();
    let d = cfg.vit.embed_dim;
    let entries: BTreeMap<u64, Vec<f32>> = train
        .ids()
        .into_iter()
        .map(|id| (id, (0..d).map(|j| (id as f32 * 0.01 + j as f32).sin()).collect()))
        .collect();
    let table = TeacherTable { dim: d, entries };
    let path = dir.path().join("teacher.dvte");
    write_teacher_file(&table, &path).unwrap();
    let back = read_teacher_file(&path).unwrap();
    assert_eq!(back, table);

    let model = Model::<f64>::new(cfg.clone(), 12).unwrap();
    let handle = TeacherHandle::<f64>::precomputed(back.clone(), d, false, 0).unwrap();
    assert!(TrainData::new(&train, &model, Some(&handle)).is_ok());

    // A dropped id is reported by name.
    let mut partial = back.clone();
    let gone = *partial.entries.keys().next().unwrap();
    partial.entries.remove(&gone);
    assert!(partial.coverage_warning(&train.ids()).unwrap().contains(&gone.to_string()));
    let handle = TeacherHandle::<f64>::precomputed(partial, d, false, 0).unwrap();
    let err = TrainData::new(&train, &model, Some(&handle)).err().unwrap();
    assert!(err.to_string().contains(&gone.to_string()));

    // Width mismatch needs the adapter.
    let narrow = TeacherTable {
        dim: 8,
        entries: back.entries.iter().map(|(&k, v)| (k, v[..8].to_vec())).collect(),
    };
    assert!(TeacherHandle::<f64>::precomputed(narrow.clone(), d, false, 0).is_err());
    let adapted = TeacherHandle::<f64>::precomputed(narrow, d, true, 0).unwrap();
    assert!(TrainData::new(&train, &model, Some(&adapted)).is_ok());
}

#[test]
fn episodes_hold_exact_shots_and_disjoint_queries() {
    let (train, _) = generate(&GeneratorSpec::default()).unwrap();
    let spec = EpisodeSpec {
        base_classes: (0..8).collect(),
        novel_classes: vec![8, 9, 10, 11],
        shots: 2,
        episodes: 5,
        query_size: 30,
        seed: 4,
    };
    let eps = sample_episodes(&train, &spec).unwrap();
    assert_eq!(eps.len(), 5);
    for ep in &eps {
        for &c in &spec.novel_classes {
            let shots = ep.support.iter().filter(|&&i| train.samples[i].labels[c]).count();
            assert_eq!(shots, 2);
        }
        assert!(ep.query.iter().all(|q| !ep.support.contains(q)));
        assert!(ep.query.len() <= 30);
    }
    assert_eq!(eps, sample_episodes(&train, &spec).unwrap());
}
