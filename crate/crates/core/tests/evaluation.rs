use std::collections::BTreeMap;
use std::fs;

use image::{Rgb, RgbImage};
use mtrnet::datagen::{load_corpus, Split};
use mtrnet::evaluation::{
    detection_path, detection_prf, evaluate_model, iou, region_boxes, region_metrics, DetBox, DetectionSet,
};
use mtrnet::geometry::Mask;
use mtrnet::inference::Identity;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn iou_hand_arithmetic() {
    let a = DetBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = DetBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &DetBox::new(20.0, 20.0, 30.0, 30.0).unwrap()), 0.0);
}

#[test]
fn region_metrics_match_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut img = || RgbImage::from_fn(4, 4, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
    let (out, gt) = (img(), img());
    let mut mask = Mask::zeros(4, 4);
    for (x, y) in [(0, 0), (1, 2), (3, 3), (2, 1), (0, 3)] {
        mask.set(x, y);
    }
    let (mut ma, mut mq, mut mn, mut ua, mut un) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                let d = (out.get_pixel(x, y)[c] as f64 - gt.get_pixel(x, y)[c] as f64) / 255.0;
                if mask.get(x, y) {
                    ma += d.abs();
                    mq += d * d;
                    mn += 1.0;
                } else {
                    ua += d.abs();
                    un += 1.0;
                }
            }
        }
    }
    let m = region_metrics(&out, &gt, &mask).unwrap();
    assert!((m.masked_l1.unwrap() - ma / mn).abs() < 1e-12);
    assert!((m.unmasked_l1.unwrap() - ua / un).abs() < 1e-12);
    assert!((m.psnr_masked.unwrap() - 10.0 * (mn / mq).log10()).abs() < 1e-9);

    let same = region_metrics(&gt, &gt, &mask).unwrap();
    assert_eq!((same.masked_l1, same.psnr_masked), (Some(0.0), Some(f64::INFINITY)));
    let mut full = Mask::zeros(4, 4);
    (0..16).for_each(|i| full.set(i % 4, i / 4));
    assert_eq!(region_metrics(&out, &gt, &full).unwrap().unmasked_l1, None);
}

#[test]
fn identity_model_scores_the_corpus_constant() {
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(&common::small_spec(11), 12, dir.path());
    let report = evaluate_model(dir.path(), Split::All, &Identity, None, 0.5).unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in load_corpus(dir.path(), Split::All).unwrap() {
        let mask = s.mask();
        for (x, y, p) in s.text_image.enumerate_pixels() {
            if mask.get(x, y) {
                let q = s.background_image.get_pixel(x, y);
                sum += (0..3).map(|c| (p[c] as f64 - q[c] as f64).abs() / 255.0).sum::<f64>();
                n += 3;
            }
        }
    }
    assert!((report.masked_l1.unwrap() - sum / n as f64).abs() < 1e-12);
    assert_eq!(report.unmasked_l1, Some(0.0));
    assert_eq!(report.n_images, 12);
    assert!(report.detection.is_none());
    let csv = report.to_csv();
    assert_eq!(csv.lines().filter(|l| l.starts_with("AGGREGATE")).count(), 1);
    assert!(csv.lines().nth(1).unwrap().ends_with(",,,,,,"));
}

#[test]
fn detection_files_are_scored_and_rows_obey_the_f_formula() {
    let dir = tempfile::tempdir().unwrap();
    let det = tempfile::tempdir().unwrap();
    common::write_corpus(&common::small_spec(12), 8, dir.path());
    // every other image: the detector still finds all its text
    for (k, s) in load_corpus(dir.path(), Split::All).unwrap().iter().enumerate() {
        let text: String = if k % 2 == 0 {
            region_boxes(&s.regions)
                .iter()
                .map(|b| format!("{},{},{},{},0.9\n", b.x1, b.y1, b.x2, b.y2))
                .collect()
        } else {
            String::new()
        };
        fs::write(detection_path(det.path(), &s.id), text).unwrap();
    }
    let a = evaluate_model(dir.path(), Split::All, &Identity, Some(det.path()), 0.5).unwrap();
    let p = a.detection.unwrap();
    assert_eq!(p.precision, 1.0);
    assert!(p.recall > 0.0 && p.recall < 1.0);
    for r in &a.rows {
        let q = r.counts.unwrap().prf();
        let f = if q.precision + q.recall > 0.0 { 2.0 * q.precision * q.recall / (q.precision + q.recall) } else { 0.0 };
        assert_eq!(q.f_score, f);
    }
    let b = evaluate_model(dir.path(), Split::All, &Identity, Some(det.path()), 0.5).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

fn boxes() -> impl Strategy<Value = Vec<DetBox>> {
    prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 1.0f64..20.0), 0..6)
        .prop_map(|v| v.into_iter().map(|(x, y, w, h)| DetBox::new(x, y, x + w, y + h).unwrap()).collect())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        for p in &a {
            for q in &b {
                let v = iou(p, q);
                prop_assert_eq!(v, iou(q, p));
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn prf_ignores_image_and_box_order(
        images in prop::collection::vec((boxes(), boxes()), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: DetectionSet = images.iter().enumerate().map(|(i, (g, _))| (format!("{i}"), g.clone())).collect();
        let det: DetectionSet = images.iter().enumerate().map(|(i, (_, d))| (format!("{i}"), d.clone())).collect();
        let base = detection_prf(&gt, &det, 0.5).unwrap();
        // rename images in reverse order and shuffle boxes within each image
        let n = images.len();
        let shuffle = |v: &Vec<DetBox>, rng: &mut ChaCha8Rng| {
            let mut v = v.clone();
            use rand::seq::SliceRandom;
            v.shuffle(rng);
            v
        };
        let gt2: BTreeMap<String, Vec<DetBox>> = gt.iter().map(|(k, v)| (format!("{}", n - k.parse::<usize>().unwrap()), v.clone())).collect();
        let mut det2 = BTreeMap::new();
        for (k, v) in &det {
            det2.insert(format!("{}", n - k.parse::<usize>().unwrap()), shuffle(v, &mut rng));
        }
        let other = detection_prf(&gt2, &det2, 0.5).unwrap();
        prop_assert_eq!(base.precision, other.precision);
        prop_assert_eq!(base.recall, other.recall);
        // more detections can only add matches
        let all: DetectionSet = gt.keys().map(|k| (k.clone(), [det[k].clone(), gt[k].clone()].concat())).collect();
        prop_assert!(detection_prf(&gt, &all, 0.5).unwrap().recall >= base.recall);
    }
}
