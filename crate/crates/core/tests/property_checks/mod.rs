//! Randomized properties, 1000 cases each.

use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resom::distributed::wire::{
    chunk_activation, FrameReader, Incoming, InitMode, Message, Reassembler,
};
use resom::{LabelingCoefficients, LateralMatrix, ResomModel, SomMap, SomParams};

fn cases() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn random_map(w: usize, h: usize, d: usize, seed: u64) -> SomMap {
    SomMap::new(SomParams::new(w, h, d).with_t_f(50).with_seed(seed)).unwrap()
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..6, 1usize..6, 1usize..6, any::<u64>())
}

fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    TestRunner::new(cases())
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

pub fn schedule_endpoints_and_monotonicity() -> Result<(), String> {
    check(
        (
            0.01f64..=1.0,
            0.001f64..=1.0,
            0.5f64..20.0,
            0.01f64..=1.0,
            1u64..1_000_000,
            0.0f64..=1.0,
            0.0f64..=1.0,
        ),
        |(eps_i, eps_ratio, sigma_i, sigma_ratio, t_f, a, b)| {
            let p = SomParams::new(4, 4, 2)
                .with_learning_rate(eps_i, eps_i * eps_ratio)
                .with_sigma(sigma_i, sigma_i * sigma_ratio)
                .with_t_f(t_f);
            prop_assert_eq!(p.epsilon_at(0).unwrap(), p.eps_i);
            prop_assert_eq!(p.epsilon_at(t_f).unwrap(), p.eps_f);
            prop_assert_eq!(p.sigma_at(0).unwrap(), p.sigma_i);
            prop_assert_eq!(p.sigma_at(t_f).unwrap(), p.sigma_f);
            let t1 = (a.min(b) * t_f as f64) as u64;
            let t2 = (a.max(b) * t_f as f64) as u64;
            prop_assert!(p.epsilon_at(t1).unwrap() >= p.epsilon_at(t2).unwrap());
            prop_assert!(p.sigma_at(t1).unwrap() >= p.sigma_at(t2).unwrap());
            prop_assert!(
                p.epsilon_at(t1).unwrap() <= p.eps_i && p.epsilon_at(t1).unwrap() >= p.eps_f
            );
            Ok(())
        },
    )
}

pub fn neighborhood_in_unit_interval() -> Result<(), String> {
    check(
        (map_strategy(), 0u64..50, 0usize..25, 0usize..25),
        |((w, h, d, seed), t, n, s)| {
            let m = random_map(w, h, d, seed);
            let (n, s) = (n % m.neurons(), s % m.neurons());
            let v = m.neighborhood(t, n, s).unwrap();
            prop_assert!(v > 0.0 && v <= 1.0);
            prop_assert_eq!(v == 1.0, n == s);
            Ok(())
        },
    )
}

pub fn weights_stay_in_input_hull() -> Result<(), String> {
    check((map_strategy(), 1usize..40), |((w, h, d, seed), steps)| {
        let mut m = SomMap::new(
            SomParams::new(w, h, d)
                .with_t_f(steps as u64)
                .with_seed(seed),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut rng, d)).collect();
        let mut lo: Vec<f64> = vec![f64::INFINITY; d];
        let mut hi: Vec<f64> = vec![f64::NEG_INFINITY; d];
        for p in inputs
            .iter()
            .map(|v| v.as_slice())
            .chain((0..m.neurons()).map(|n| m.weight(n)))
        {
            for c in 0..d {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        for (t, v) in inputs.iter().enumerate() {
            m.train_step(v, t as u64).unwrap();
        }
        for n in 0..m.neurons() {
            for (c, x) in m.weight(n).iter().enumerate() {
                prop_assert!(*x >= lo[c] - 1e-12 && *x <= hi[c] + 1e-12);
            }
        }
        Ok(())
    })
}

pub fn activation_argmax_is_distance_argmin() -> Result<(), String> {
    check(
        (map_strategy(), 0.05f64..5.0),
        |((w, h, d, seed), alpha)| {
            let m = SomMap::new(
                SomParams::new(w, h, d)
                    .with_t_f(1)
                    .with_seed(seed)
                    .with_alpha(alpha),
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(!seed);
            let v = random_vec(&mut rng, d);
            let a = m.activation(&v).unwrap();
            let mut best = 0;
            for (i, x) in a.values.iter().enumerate() {
                if *x > a.values[best] {
                    best = i;
                }
            }
            prop_assert_eq!(best, m.bmu(&v).unwrap().0);
            prop_assert_eq!(a.bmu_index, best);
            prop_assert!(a.values.iter().all(|x| *x > 0.0 && *x <= 1.0));
            Ok(())
        },
    )
}

pub fn label_probabilities_are_normalized() -> Result<(), String> {
    check(
        (any::<u64>(), 1usize..12, 1usize..5),
        |(seed, n, classes)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps = vec![
                random_map(3, 2, 3, seed),
                random_map(2, 2, 2, seed.wrapping_add(1)),
            ];
            let mut m = ResomModel::build(
                maps,
                1.0,
                LabelingCoefficients {
                    c1: vec![1.0, 0.5],
                    c2: vec![vec![0.0, 0.3], vec![0.7, 0.0]],
                },
            )
            .unwrap();
            let samples: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| vec![random_vec(&mut rng, 3), random_vec(&mut rng, 2)])
                .collect();
            let truth: Vec<u16> = (0..n)
                .map(|_| rng.random_range(0..classes) as u16)
                .collect();
            m.train_laterals(&samples).unwrap();
            m.label_neurons(&samples, &truth, classes).unwrap();
            for (map_probs, map_labels) in m.label_probabilities().iter().zip(m.labels()) {
                for (p, l) in map_probs.iter().zip(map_labels) {
                    let total: f64 = p.iter().sum();
                    match l {
                        Some(c) => {
                            prop_assert!((total - 1.0).abs() < 1e-9);
                            prop_assert!(p.iter().all(|x| *x <= p[*c as usize]));
                        }
                        None => prop_assert_eq!(total, 0.0),
                    }
                }
            }
            Ok(())
        },
    )
}

pub fn unimodal_labels_ignore_laterals() -> Result<(), String> {
    check((any::<u64>(), 1usize..10), |(seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = vec![random_map(3, 3, 2, seed), random_map(2, 3, 4, seed ^ 1)];
        let mut a = ResomModel::build(maps, 1.0, LabelingCoefficients::unimodal(2)).unwrap();
        let mut b = a.clone();
        let w: Vec<f64> = (0..54).map(|_| rng.random::<f64>() * 10.0).collect();
        b.replace_lateral(0, 1, LateralMatrix::from_weights(9, 6, 1.0, w).unwrap())
            .unwrap();
        let samples: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| vec![random_vec(&mut rng, 2), random_vec(&mut rng, 4)])
            .collect();
        let truth: Vec<u16> = (0..n).map(|_| rng.random_range(0..3)).collect();
        a.label_neurons(&samples, &truth, 3).unwrap();
        b.label_neurons(&samples, &truth, 3).unwrap();
        prop_assert_eq!(a.labels(), b.labels());
        prop_assert_eq!(a.label_probabilities(), b.label_probabilities());
        Ok(())
    })
}

pub fn single_map_inference_is_bmu_label() -> Result<(), String> {
    check((map_strategy(), 1usize..6), |((w, h, d, seed), classes)| {
        let map = random_map(w, h, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(7));
        let labels: Vec<Option<u16>> = (0..map.neurons())
            .map(|_| Some(rng.random_range(0..classes) as u16))
            .collect();
        let mut m =
            ResomModel::build(vec![map.clone()], 1.0, LabelingCoefficients::unimodal(1)).unwrap();
        m.set_labels(classes, vec![labels.clone()]).unwrap();
        let v = random_vec(&mut rng, d);
        let p = m.infer(&[v.as_slice()]).unwrap();
        let bmu = map.bmu(&v).unwrap().0;
        prop_assert_eq!(p.neuron, bmu);
        prop_assert_eq!(Some(p.class), labels[bmu]);
        Ok(())
    })
}

pub fn hebb_additive_and_density_monotone() -> Result<(), String> {
    check((any::<u64>(), 0usize..30, 0usize..30), |(seed, n1, n2)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut updates = Vec::new();
        for _ in 0..n1 + n2 {
            updates.push((
                rng.random_range(0..5),
                rng.random_range(1e-3..=1.0),
                rng.random_range(0..4),
                rng.random_range(1e-3..=1.0),
            ));
        }
        let run = |u: &[(usize, f64, usize, f64)]| {
            let mut w = LateralMatrix::zeros(5, 4, 0.7).unwrap();
            let mut density = Vec::new();
            for &(x, ax, y, ay) in u {
                w.hebb_update(x, ax, y, ay).unwrap();
                density.push(w.sparsity());
            }
            (w, density)
        };
        let (all, density) = run(&updates);
        let (first, _) = run(&updates[..n1]);
        let (second, _) = run(&updates[n1..]);
        for ((a, f), s) in all
            .weights()
            .iter()
            .zip(first.weights())
            .zip(second.weights())
        {
            prop_assert!((a - (f + s)).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert!(density.windows(2).all(|p| p[0] <= p[1]));
        Ok(())
    })
}

pub fn prune_is_idempotent() -> Result<(), String> {
    check(
        (any::<u64>(), 0.001f64..=1.0, 0.0f64..0.9),
        |(seed, keep, zeros)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..48)
                .map(|_| {
                    if rng.random::<f64>() < zeros {
                        0.0
                    } else {
                        (rng.random_range(1..6) as f64) / 4.0
                    }
                })
                .collect();
            let mut once = LateralMatrix::from_weights(6, 8, 1.0, w).unwrap();
            once.prune(keep).unwrap();
            let mut twice = once.clone();
            twice.prune(keep).unwrap();
            prop_assert_eq!(once.weights(), twice.weights());
            Ok(())
        },
    )
}

pub fn wire_round_trip() -> Result<(), String> {
    check(
        (any::<u64>(), any::<u32>(), 0u8..15, 0usize..200),
        |(seed, request_id, kind, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let floats: Vec<f64> = (0..len)
                .map(|_| f64::from_bits(rng.random::<u64>() & !(0x7ff << 52)) + rng.random::<f64>())
                .collect();
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let text: String = (0..len).map(|_| rng.random_range('a'..='z')).collect();
            let msg = match kind {
                0 => Message::Init {
                    nodes: rng.random(),
                    aggregator: rng.random(),
                    mode: if rng.random() {
                        InitMode::Inference
                    } else {
                        InitMode::Hebbian
                    },
                },
                1 => Message::InitAck {
                    node_id: rng.random(),
                    neurons: rng.random(),
                    input_dim: rng.random(),
                    classes: rng.random(),
                },
                2 => Message::ComputeActivation { input: floats },
                3 => Message::ActivationResult {
                    values: floats,
                    bmu: rng.random(),
                },
                4 => Message::PushChunk {
                    source: rng.random(),
                    bmu: rng.random(),
                    total_len: rng.random(),
                    offset: rng.random(),
                    data: bytes,
                },
                5 => Message::PushForward { target: text },
                6 => Message::PushAck,
                7 => Message::HebbStep,
                8 => Message::HebbPersist { dir: text },
                9 => Message::HebbAck,
                10 => Message::Predict,
                11 => Message::PredictResult {
                    class: Some(rng.random_range(0..u16::MAX)),
                    map: rng.random(),
                    neuron: rng.random(),
                },
                12 => Message::PredictResult {
                    class: None,
                    map: rng.random(),
                    neuron: rng.random(),
                },
                13 => Message::Shutdown,
                _ => Message::Error { text },
            };
            let encoded = msg.to_frame(request_id).encode();
            let mut reader = FrameReader::new(encoded.as_slice());
            let Some(Incoming::Frame(frame)) = reader.next_incoming().unwrap() else {
                return Err(TestCaseError::fail("no frame decoded"));
            };
            prop_assert_eq!(frame.request_id, request_id);
            prop_assert_eq!(Message::from_frame(&frame).unwrap(), msg);
            prop_assert!(reader.next_incoming().unwrap().is_none());
            Ok(())
        },
    )
}

pub fn frames_survive_interleaved_garbage() -> Result<(), String> {
    check((any::<u64>(), 1usize..6), |(seed, frames)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stream = Vec::new();
        for i in 0..frames {
            let junk: Vec<u8> = (0..rng.random_range(0..20))
                .map(|_| rng.random_range(0u8..=255))
                .filter(|b| *b != b'R')
                .collect();
            stream.extend(junk);
            let input: Vec<f64> = (0..rng.random_range(0..8)).map(|_| rng.random()).collect();
            stream.extend(
                Message::ComputeActivation { input }
                    .to_frame(i as u32)
                    .encode(),
            );
        }
        let mut reader = FrameReader::new(stream.as_slice());
        let mut got = Vec::new();
        while let Some(x) = reader.next_incoming().unwrap() {
            if let Incoming::Frame(f) = x {
                got.push(f.request_id);
            }
        }
        prop_assert_eq!(got, (0..frames as u32).collect::<Vec<_>>());
        Ok(())
    })
}

pub fn chunking_is_size_invariant() -> Result<(), String> {
    check(
        (any::<u64>(), 1usize..300, 1usize..80, any::<bool>()),
        |(seed, n, words, reverse)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..n)
                .map(|_| f64::from_bits(rng.random::<u64>()))
                .collect();
            let packet = words * 8;
            let mut chunks = chunk_activation(3, &values, 17, packet).unwrap();
            prop_assert_eq!(chunks.len(), (n * 8).div_ceil(packet));
            if reverse {
                chunks.reverse();
            }
            let mut r = Reassembler::new();
            let mut out = None;
            for c in chunks {
                let Message::PushChunk {
                    source,
                    bmu,
                    total_len,
                    offset,
                    data,
                } = c
                else {
                    unreachable!()
                };
                prop_assert!(data.len() <= packet);
                if let Some(done) = r.accept(1, source, bmu, total_len, offset, &data).unwrap() {
                    out = Some(done);
                }
            }
            let done = out.unwrap();
            prop_assert_eq!(done.bmu, 17);
            let a: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = done.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            Ok(())
        },
    )
}

pub type Check = fn() -> Result<(), String>;

/// Every property with its name.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        (
            "schedule_endpoints_and_monotonicity",
            schedule_endpoints_and_monotonicity,
        ),
        (
            "neighborhood_in_unit_interval",
            neighborhood_in_unit_interval,
        ),
        ("weights_stay_in_input_hull", weights_stay_in_input_hull),
        (
            "activation_argmax_is_distance_argmin",
            activation_argmax_is_distance_argmin,
        ),
        (
            "label_probabilities_are_normalized",
            label_probabilities_are_normalized,
        ),
        (
            "unimodal_labels_ignore_laterals",
            unimodal_labels_ignore_laterals,
        ),
        (
            "single_map_inference_is_bmu_label",
            single_map_inference_is_bmu_label,
        ),
        (
            "hebb_additive_and_density_monotone",
            hebb_additive_and_density_monotone,
        ),
        ("prune_is_idempotent", prune_is_idempotent),
        ("wire_round_trip", wire_round_trip),
        (
            "frames_survive_interleaved_garbage",
            frames_survive_interleaved_garbage,
        ),
        ("chunking_is_size_invariant", chunking_is_size_invariant),
    ]
}
