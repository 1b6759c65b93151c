mod common;

use std::collections::HashSet;

use mmfuse::data::{self, file_digest, generate, load_dataset, load_manifest, save_dataset, split, SyntheticSpec};
use mmfuse::error::DataError;
use proptest::prelude::*;

proptest! {
    #[test]
    fn splits_are_disjoint_and_cover(n in 3usize..400, a in 1u32..20, b in 0u32..20, c in 0u32..20, seed in any::<u64>()) {
        let total = (a + b + c) as f64;
        let ratios = [a as f64 / total, b as f64 / total, c as f64 / total];
        let s = split(n, ratios, seed).unwrap();
        prop_assert_eq!(s.val.len(), (n as f64 * ratios[1]).floor() as usize);
        prop_assert_eq!(s.test.len(), (n as f64 * ratios[2]).floor() as usize);
        let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        prop_assert!(all.iter().all(|&i| i < n));
        prop_assert_eq!(split(n, ratios, seed).unwrap(), s);
    }
}

#[test]
fn split_of_290_uses_floor_rule() {
    let s = split(290, [0.7, 0.1, 0.2], 3).unwrap();
    // 290·0.2 = 58 exactly, so test gets 58 and train keeps the remainder
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (203, 29, 58));
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { n_samples: 24, image_size: 16, seed, ..Default::default() }
}

#[test]
fn files_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pemd"), dir.path().join("b.pemd"));
    save_dataset(&generate(&small_spec(5)).unwrap(), &a).unwrap();
    save_dataset(&generate(&small_spec(5)).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(file_digest(&a).unwrap(), file_digest(&b).unwrap());
    let d = generate(&small_spec(5)).unwrap();
    assert_eq!(load_dataset(&a).unwrap(), d);
    let size = std::fs::metadata(&a).unwrap().len() as usize;
    let per_sample = 4 * d.tasks.len() + 2 * d.samples[0].derm.encoded_len();
    assert_eq!(size, data::header_len(&d) + d.len() * per_sample);
}

#[test]
fn truncated_file_reports_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.pemd");
    save_dataset(&generate(&small_spec(1)).unwrap(), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Corrupt(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_dataset(&p), Err(DataError::Format(_))));
}

#[test]
fn manifest_loads_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&small_spec(2)).unwrap();
    let mut csv = String::from("sample_id,clinical_path,derm_path,label_1,label_2\n");
    for (i, s) in d.samples.iter().take(4).enumerate() {
        for (kind, t) in [("c", &s.clinical), ("d", &s.derm)] {
            let mut f = std::fs::File::create(dir.path().join(format!("{kind}{i}.pemt"))).unwrap();
            t.write_to(&mut f).unwrap();
        }
        csv.push_str(&format!("s{i},c{i}.pemt,d{i}.pemt,{},{}\n", s.labels[0], s.labels[1]));
    }
    let path = dir.path().join("manifest.csv");
    std::fs::write(&path, csv).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.len(), 4);
    assert_eq!(m.samples[..], d.samples[..4]);
    assert!(m.spec.is_none());
    std::fs::write(&path, "id,a,b,label\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(DataError::Format(_))));
}

#[test]
fn dermoscopy_probe_beats_clinical_probe() {
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let spec = SyntheticSpec { seed, ..Default::default() };
        let d = generate(&spec).unwrap();
        let s = split(d.len(), [0.7, 0.1, 0.2], seed).unwrap();
        gaps.push(common::linear_probe_auc(&d, &s, true) - common::linear_probe_auc(&d, &s, false));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean > 0.05, "mean probe gap {mean}, per seed {gaps:?}");
}

#[test]
fn equal_snr_without_nuisance_is_symmetric() {
    let spec = SyntheticSpec {
        snr_derm: 2.0,
        snr_clinical: 2.0,
        nuisance_strength: 0.0,
        allow_inverted_prior: true,
        ..Default::default()
    };
    let d = generate(&spec).unwrap();
    let s = split(d.len(), [0.7, 0.1, 0.2], 0).unwrap();
    let gap = common::linear_probe_auc(&d, &s, true) - common::linear_probe_auc(&d, &s, false);
    assert!(gap.abs() < 0.03, "gap {gap}");
    let moments = |derm: bool| {
        let v: Vec<f64> = d.samples.iter().flat_map(|x| if derm { x.derm.data() } else { x.clinical.data() }.to_vec()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
    };
    let ((m1, v1), (m2, v2)) = (moments(true), moments(false));
    assert!((m1 - m2).abs() < 0.01 && (v1 - v2).abs() < 0.01, "{m1} {v1} / {m2} {v2}");
}
