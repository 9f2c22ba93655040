use ndarray::Array2;
use tgm_core::data::{gen_synthetic, SynthSpec, Synthetic};

/// `num_classes × T` projections of one video's frames on the trigger
/// directions.
fn projections(syn: &Synthetic<f64>, video: usize) -> Array2<f64> {
    let frames = syn.samples[video].features.values.index_axis(ndarray::Axis(0), 0).to_owned();
    syn.directions.dot(&frames)
}

#[test]
fn noise_free_labels_are_shifted_triggers() {
    let spec = SynthSpec {
        num_videos: 30,
        noise_std: 0.0,
        seed: 5,
        ..Default::default()
    };
    let syn = gen_synthetic::<f64>(&spec).unwrap();
    for v in 0..spec.num_videos {
        let p = projections(&syn, v);
        let z = &syn.samples[v].labels.z;
        let t = z.nrows();
        for c in 0..spec.num_classes {
            let delay = spec.delays[c];
            for tt in 0..t {
                let triggered = tt >= delay && p[[c, tt - delay]] > 0.5;
                assert_eq!(z[[tt, c]] == 1, triggered, "video {v} class {c} frame {tt}");
            }
        }
    }
}

#[test]
fn correlation_peaks_at_the_planted_delay() {
    let spec = SynthSpec::default();
    let syn = gen_synthetic::<f64>(&spec).unwrap();
    for c in 0..spec.num_classes {
        let mut best = (f64::MIN, 0);
        for lag in 0..=12 {
            let mut acc = 0.0;
            for v in 0..spec.num_videos {
                let p = projections(&syn, v);
                let z = &syn.samples[v].labels.z;
                for tt in lag..z.nrows() {
                    acc += p[[c, tt - lag]] * (f64::from(z[[tt, c]]) - 0.1);
                }
            }
            if acc > best.0 {
                best = (acc, lag);
            }
        }
        assert_eq!(best.1, spec.delays[c], "class {c}");
    }
}

#[test]
fn every_class_has_positives() {
    let syn = gen_synthetic::<f64>(&SynthSpec::default()).unwrap();
    for c in 0..5 {
        let n: usize = syn.samples.iter().map(|s| s.labels.positives(c)).sum();
        assert!(n > 100, "class {c}: {n}");
    }
}
