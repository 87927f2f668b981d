use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use recall_core::alignment::align_session;
use recall_core::domain::{Channel, EpisodicRecord, GazeKind, Modality, PhysioSample, MS_PER_SECOND};
use recall_testkit::oracle::{population_mean_std, raw_channel_mean, relative_close, weighted_second_mean};
use recall_testkit::{rng, synth};

fn kind_counts(records: &[EpisodicRecord]) -> (u64, u64, u64) {
    records.iter().filter_map(|r| r.gaze.as_ref()).fold((0, 0, 0), |(f, b, s), g| {
        (f + u64::from(g.fixation_count), b + u64::from(g.blink_count), s + u64::from(g.saccade_count))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gaze_and_physio_are_conserved(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = synth::session(&mut r, "p", 120);
        let records = align_session(&s.manifest, &s.segments, &s.physio, &s.gaze).unwrap();

        let expected = s.gaze.iter().fold((0, 0, 0), |(f, b, sa), e| match e.kind {
            GazeKind::Fixation { .. } => (f + 1, b, sa),
            GazeKind::Blink => (f, b + 1, sa),
            GazeKind::Saccade { .. } => (f, b, sa + 1),
        });
        prop_assert_eq!(kind_counts(&records), expected);

        for channel in Channel::ALL {
            let n = s.physio.iter().filter(|p| p.channel == channel).count() as u64;
            let counted: u64 = records
                .iter()
                .filter_map(|r| r.physio.as_ref()?.channel(channel))
                .map(|c| u64::from(c.count))
                .sum();
            prop_assert_eq!(counted, n);
            let raw = raw_channel_mean(&s.physio, channel).unwrap();
            let resampled = weighted_second_mean(&records, channel).unwrap();
            prop_assert!(relative_close(raw, resampled, 1e-9), "{raw} vs {resampled}");
        }
    }

    #[test]
    fn grid_is_strictly_increasing_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = synth::session(&mut r, "p", 90);
        let records = align_session(&s.manifest, &s.segments, &s.physio, &s.gaze).unwrap();
        prop_assert!(records.windows(2).all(|w| w[0].second < w[1].second));
        for rec in &records {
            prop_assert_eq!(rec.ts_utc, s.manifest.started_at + rec.second * MS_PER_SECOND);
            if let Some(g) = &rec.gaze {
                prop_assert!((0.0..=1.0).contains(&g.focus));
            }
            if let Some(p) = &rec.physio {
                for (_, c) in p.channels() {
                    prop_assert!(c.min <= c.mean && c.mean <= c.max);
                }
            }
            prop_assert!(rec.validate().is_ok());
        }
    }

    #[test]
    fn normalization_matches_independent_baseline(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = synth::session(&mut r, "p", 200);
        let records = align_session(&s.manifest, &s.segments, &s.physio, &s.gaze).unwrap();
        let mut baselines = BTreeMap::new();
        for channel in Channel::ALL {
            let means: Vec<f64> = records.iter().filter_map(|r| r.physio.as_ref()?.channel(channel)).map(|c| c.mean).collect();
            baselines.insert(channel, population_mean_std(&means));
            if means.len() > 1 {
                let zs: Vec<f64> = records.iter().filter_map(|r| r.z_mean(channel)).collect();
                let (zm, zs_std) = population_mean_std(&zs);
                prop_assert!(zm.abs() < 1e-9);
                let (_, sd) = population_mean_std(&means);
                if sd > 1e-12 {
                    prop_assert!((zs_std - 1.0).abs() < 1e-9);
                }
            }
        }
        for rec in &records {
            let Some(p) = &rec.physio else {
                prop_assert!(rec.stress.is_none());
                continue;
            };
            let mut zs = Vec::new();
            for (channel, c) in p.channels() {
                let (m, sd) = baselines[&channel];
                let expected = if sd == 0.0 { 0.0 } else { (c.mean - m) / sd };
                let z = c.z_mean.unwrap();
                prop_assert!((z - expected).abs() < 1e-9, "{z} vs {expected}");
                zs.push(expected);
            }
            let stress = zs.iter().sum::<f64>() / zs.len() as f64;
            prop_assert!((rec.stress.unwrap() - stress).abs() < 1e-9);
        }
    }

    #[test]
    fn disabled_modalities_do_not_affect_the_rest(seed in any::<u64>(), mask in 1u8..8) {
        let mut r = rng(seed);
        let s = synth::session(&mut r, "p", 60);
        let full = align_session(&s.manifest, &s.segments, &s.physio, &s.gaze).unwrap();
        let enabled: BTreeSet<Modality> =
            Modality::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| m).collect();
        let mut manifest = s.manifest.clone();
        manifest.modalities_enabled = enabled.clone();
        let partial = align_session(&manifest, &s.segments, &s.physio, &s.gaze).unwrap();

        let speech = enabled.contains(&Modality::Speech);
        let physio = enabled.contains(&Modality::Physio);
        let gaze = enabled.contains(&Modality::Gaze);
        let expected_seconds: Vec<i64> = full
            .iter()
            .filter(|r| {
                (speech && !r.transcript.is_empty()) || (physio && r.physio.is_some()) || (gaze && r.gaze.is_some())
            })
            .map(|r| r.second)
            .collect();
        prop_assert_eq!(partial.iter().map(|r| r.second).collect::<Vec<_>>(), expected_seconds);

        let by_second: BTreeMap<i64, &EpisodicRecord> = full.iter().map(|r| (r.second, r)).collect();
        for rec in &partial {
            let f = by_second[&rec.second];
            if speech { prop_assert_eq!(&rec.transcript, &f.transcript) } else { prop_assert!(rec.transcript.is_empty()) }
            if physio {
                prop_assert_eq!(&rec.physio, &f.physio);
                prop_assert_eq!(rec.stress, f.stress);
            } else {
                prop_assert!(rec.physio.is_none() && rec.stress.is_none());
            }
            if gaze { prop_assert_eq!(&rec.gaze, &f.gaze) } else { prop_assert!(rec.gaze.is_none()) }
        }
    }
}

#[test]
fn three_second_heart_rate_baseline() {
    let m = synth::manifest("hr", synth::BASE_EPOCH_MS);
    let physio: Vec<PhysioSample> = [60.0, 70.0, 80.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| PhysioSample::new(i as i64 * 1000 + 500, Channel::HR, v).unwrap())
        .collect();
    let records = align_session(&m, &[], &physio, &[]).unwrap();
    let z: Vec<f64> = records.iter().map(|r| r.z_mean(Channel::HR).unwrap()).collect();
    let expected = [-1.224744871391589, 0.0, 1.224744871391589];
    for (got, want) in z.iter().zip(expected) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    let stress: Vec<f64> = records.iter().map(|r| r.stress.unwrap()).collect();
    assert_eq!(stress, z);
    let (_, sd) = population_mean_std(&[60.0, 70.0, 80.0]);
    assert!((sd - 8.16496580927726).abs() < 1e-12);
}
