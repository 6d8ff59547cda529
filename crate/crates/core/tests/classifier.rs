use std::sync::OnceLock;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use wavepin::classifier::*;
use wavepin::config::Config;
use wavepin::imager::{render_image, CameraModel};
use wavepin::lattice::{LatticeGeometry, SiteIndex};
use wavepin::par::Execution;
use wavepin::pipeline;
use wavepin::rng::{stream, Purpose};

fn trained() -> &'static TrainReport {
    static W: OnceLock<TrainReport> = OnceLock::new();
    W.get_or_init(|| pipeline::train_classifier(&Config::default(), Execution::Parallel).unwrap())
}

fn camera() -> CameraModel {
    CameraModel { width: 40, height: 40, offset: [20.0, 20.0], ..CameraModel::default() }
}

#[test]
fn roi_is_centred_on_the_atom() {
    let geom = LatticeGeometry::default();
    let cam = camera();
    for k in 0..20 {
        let site = SiteIndex::new(k % 3 - 1, k / 7 - 1);
        let p = cam.to_pixels(&geom.site_position(site));
        let img = render_image(&geom, &[site], &cam, &mut stream(1, Purpose::Imaging, k as u64)).unwrap();
        let roi = extract_roi(&img, &p).unwrap();
        let arg = (0..INPUT).max_by(|&a, &b| roi[a].total_cmp(&roi[b])).unwrap();
        let (dx, dy) = ((arg % ROI) as i64 - 4, (arg / ROI) as i64 - 4);
        assert!(dx.abs() <= 1 && dy.abs() <= 1, "argmax offset ({dx}, {dy})");
    }
    assert!(extract_roi(&render_image(&geom, &[], &cam, &mut stream(1, Purpose::Imaging, 99)).unwrap(), &Vector2::new(2.0, 20.0)).is_none());
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = stream(2, Purpose::Perturbation, 0);
    let mut worst: f64 = 0.0;
    for probe in 0..100 {
        let w = MlpWeights::random(&mut rng);
        let x: Vec<f64> = (0..INPUT).map(|_| StandardNormal.sample(&mut rng)).collect();
        let label = probe % 2 == 0;
        let mut grad = vec![0.0; w.n_params()];
        backprop(&w, &x, label, &mut grad);
        let p0 = flatten(&w);
        // probe a parameter with a non-zero gradient (dead ReLU units give exact zeros)
        let k = loop {
            let k = rng.random_range(0..p0.len());
            if grad[k].abs() > 1e-6 {
                break k;
            }
        };
        let h = 1e-6 * p0[k].abs().max(1e-2);
        let loss_at = |v: f64| {
            let mut p = p0.clone();
            p[k] = v;
            let mut q = w.clone();
            unflatten(&mut q, &p);
            backprop(&q, &x, label, &mut vec![0.0; p.len()])
        };
        let fd = (loss_at(p0[k] + h) - loss_at(p0[k] - h)) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / grad[k].abs());
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn weights_round_trip_through_bytes() {
    let w = MlpWeights::random(&mut stream(3, Purpose::Training, 0));
    let mut buf = Vec::new();
    w.write_to(&mut buf).unwrap();
    assert_eq!(MlpWeights::read_from(buf.as_slice()).unwrap(), w);
    buf[0] ^= 0xff;
    assert!(MlpWeights::read_from(buf.as_slice()).is_err());
    assert!(MlpWeights::read_from(&buf[..20]).is_err());
}

#[test]
fn corpus_is_balanced_and_schedule_independent() {
    let cfg = Config::default();
    let geom = cfg.lattice.geometry().unwrap();
    let spec = CorpusSpec { frames: 30, ..cfg.classifier.corpus };
    let cam = corpus_camera(&geom, &cfg.camera, &spec);
    let a = generate_corpus(&geom, &cam, &spec, 4, 0, Execution::Parallel).unwrap();
    let b = generate_corpus(&geom, &cam, &spec, 4, 0, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    let pos = a.iter().filter(|s| s.label).count();
    assert_eq!(2 * pos, a.len());
    assert!(pos > 50);
}

#[test]
fn training_reaches_the_target_accuracy() {
    let r = trained();
    assert!(r.holdout_accuracy >= 0.995, "{}", r.holdout_accuracy);
    // moving-average loss never rises by more than noise
    let c = &r.learning_curve;
    let avg: Vec<f64> = c.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] <= 1.1 * w[0] + 1e-4, "{c:?}");
    }
    assert!(c.last().unwrap() < &(0.5 * c[0]));
}

#[test]
fn trained_network_reads_isolated_and_neighbouring_atoms() {
    let w = &trained().weights;
    let geom = LatticeGeometry::default();
    let cam = camera();
    let centre = SiteIndex::new(0, 0);
    let p = cam.to_pixels(&geom.site_position(centre));
    let (mut occ, mut empty) = (0, 0);
    for k in 0..50u64 {
        let img = render_image(&geom, &[centre], &cam, &mut stream(5, Purpose::Imaging, k)).unwrap();
        if classify_raw(w, &extract_roi(&img, &p).unwrap()) > 0.9 {
            occ += 1;
        }
        // nearest neighbour lit, centre dark
        let img = render_image(&geom, &[SiteIndex::new(1, 0)], &cam, &mut stream(6, Purpose::Imaging, k)).unwrap();
        if classify_raw(w, &extract_roi(&img, &p).unwrap()) < 0.5 {
            empty += 1;
        }
    }
    assert_eq!(occ, 50);
    assert_eq!(empty, 50);
}
