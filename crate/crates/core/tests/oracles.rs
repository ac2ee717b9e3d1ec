use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use resom::dataset::{split, synth_multimodal, SynthSpec};
use resom::{train_maps, LabelingCoefficients, LateralMatrix, ResomModel, SomMap, SomParams};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// BMU and activation recomputed from the raw weights.
fn brute_activation(map: &SomMap, v: &[f64]) -> (usize, Vec<f64>) {
    let alpha = map.params().alpha;
    let d: Vec<f64> = (0..map.neurons()).map(|n| dist(map.weight(n), v)).collect();
    let mut bmu = 0;
    for n in 0..d.len() {
        if d[n] < d[bmu] {
            bmu = n;
        }
    }
    (bmu, d.iter().map(|x| (-x / alpha).exp()).collect())
}

/// `a^l · W^{l,j}_s` evaluated cell by cell.
fn brute_drive(model: &ResomModel, l: usize, j: usize, a_l: &[f64], s: usize) -> f64 {
    if l < j {
        let w = model.lateral(l, j);
        (0..w.rows()).map(|r| a_l[r] * w.get(r, s)).sum()
    } else {
        let w = model.lateral(j, l);
        (0..w.cols()).map(|c| a_l[c] * w.get(s, c)).sum()
    }
}

#[test]
fn som_finds_gaussian_clusters() {
    let centers: [[f64; 2]; 4] = [[0.2, 0.2], [0.8, 0.2], [0.2, 0.8], [0.8, 0.8]];
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut clusters: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 4];
    for i in 0..800 {
        let c = &centers[i % 4];
        clusters[i % 4].push(
            c.iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect(),
        );
    }
    let samples: Vec<&Vec<f64>> = clusters.iter().flatten().collect();
    let mut map = SomMap::new(
        SomParams::new(4, 4, 2)
            .with_t_f(10 * samples.len() as u64)
            .with_seed(3),
    )
    .unwrap();
    map.train(&samples).unwrap();

    for points in &clusters {
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|c| points.iter().map(|p| p[c]).sum::<f64>() / n)
            .collect();
        let sd: Vec<f64> = (0..2)
            .map(|c| (points.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let near = (0..map.neurons()).any(|k| {
            let w = map.weight(k);
            (0..2).all(|c| (w[c] - mean[c]).abs() <= 3.0 * sd[c])
        });
        assert!(near, "no neuron within 3 sd of cluster mean {mean:?}");
    }
}

#[test]
fn lateral_training_matches_replay() {
    let spec = SynthSpec {
        classes: 5,
        dims: vec![6, 3],
        samples_per_class: 40,
        noise_sigma: vec![0.1, 0.2],
        seed: 21,
    };
    let data = synth_multimodal(&spec).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let maps = train_maps(
        &[
            SomParams::new(4, 4, 6).with_t_f(2000).with_seed(1),
            SomParams::new(3, 5, 3).with_t_f(2000).with_seed(2),
        ],
        &data,
        &rows,
    )
    .unwrap();
    let mu = 0.5;
    let mut replay = vec![0.0; 16 * 15];
    let pairs: Vec<(&[f64], &[f64])> = rows
        .iter()
        .map(|&i| {
            let s = data.sample(i);
            (s[0], s[1])
        })
        .collect();
    for (x, y) in &pairs {
        let (bx, ax) = brute_activation(&maps[0], x);
        let (by, ay) = brute_activation(&maps[1], y);
        replay[bx * 15 + by] += mu * ax[bx] * ay[by];
    }
    let mut w = LateralMatrix::for_maps(&maps[0], &maps[1], mu).unwrap();
    let stats = w.train(&maps[0], &maps[1], &pairs).unwrap();
    for (a, b) in w.weights().iter().zip(&replay) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
    assert_eq!(
        stats.nonzero_fraction,
        replay.iter().filter(|x| **x > 0.0).count() as f64 / 240.0
    );
    assert_eq!(stats.history.len(), 100);

    let mut model = ResomModel::build(maps, mu, LabelingCoefficients::unimodal(2)).unwrap();
    let model_stats = model.train_laterals(&data.samples(&rows)).unwrap();
    assert_eq!(model.lateral(0, 1), &w);
    assert_eq!(model_stats[0], stats);
}

fn three_class_model() -> (ResomModel, Vec<Vec<Vec<f64>>>, Vec<u16>) {
    let spec = SynthSpec {
        classes: 3,
        dims: vec![4, 5, 2],
        samples_per_class: 30,
        noise_sigma: vec![0.15],
        seed: 8,
    };
    let data = synth_multimodal(&spec).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let params: Vec<SomParams> = [4, 5, 2]
        .iter()
        .enumerate()
        .map(|(j, &d)| SomParams::new(3, 3, d).with_t_f(900).with_seed(j as u64))
        .collect();
    let maps = train_maps(&params, &data, &rows).unwrap();
    let coeffs = LabelingCoefficients {
        c1: vec![1.0, 0.5, 2.0],
        c2: vec![
            vec![0.0, 0.2, 0.1],
            vec![0.3, 0.0, 0.05],
            vec![0.4, 0.6, 0.0],
        ],
    };
    let mut model = ResomModel::build(maps, 1.0, coeffs).unwrap();
    model.train_laterals(&data.samples(&rows)).unwrap();
    let samples = rows
        .iter()
        .map(|&i| data.sample(i).into_iter().map(<[f64]>::to_vec).collect())
        .collect();
    (model, samples, data.classes().to_vec())
}

#[test]
fn labels_match_tally_oracle() {
    let (mut model, samples, classes) = three_class_model();
    let labeled: Vec<usize> = (0..samples.len()).step_by(3).collect();
    let lab_samples: Vec<Vec<Vec<f64>>> = labeled.iter().map(|&i| samples[i].clone()).collect();
    let lab_classes: Vec<u16> = labeled.iter().map(|&i| classes[i]).collect();
    model.label_neurons(&lab_samples, &lab_classes, 3).unwrap();

    let k = model.k();
    let coeffs = model.coefficients().clone();
    for j in 0..k {
        let mut tally = vec![[0.0f64; 3]; model.map(j).neurons()];
        for (sample, &c) in lab_samples.iter().zip(&lab_classes) {
            let acts: Vec<Vec<f64>> = (0..k)
                .map(|m| brute_activation(model.map(m), &sample[m]).1)
                .collect();
            for (s, t) in tally.iter_mut().enumerate() {
                let mut a = coeffs.c1[j] * acts[j][s];
                for l in (0..k).filter(|&l| l != j) {
                    a += coeffs.c2[l][j] * brute_drive(&model, l, j, &acts[l], s);
                }
                t[c as usize] += a;
            }
        }
        for (s, t) in tally.iter().enumerate() {
            let mut best = 0;
            for c in 1..3 {
                if t[c] > t[best] {
                    best = c;
                }
            }
            let expected = if t.iter().sum::<f64>() > 0.0 {
                Some(best as u16)
            } else {
                None
            };
            assert_eq!(
                model.labels()[j][s],
                expected,
                "map {j} neuron {s} tally {t:?}"
            );
            let total: f64 = t.iter().sum();
            for (p, x) in model.label_probabilities()[j][s].iter().zip(t) {
                assert!((p - x / total).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn inference_matches_enumeration() {
    let (mut model, samples, classes) = three_class_model();
    model.label_neurons(&samples, &classes, 3).unwrap();
    let k = model.k();
    for sample in &samples {
        let acts: Vec<Vec<f64>> = (0..k)
            .map(|m| brute_activation(model.map(m), &sample[m]).1)
            .collect();
        let mut best = (0, 0);
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..k {
            for s in 0..model.map(j).neurons() {
                let mut score = acts[j][s];
                for l in (0..k).filter(|&l| l != j) {
                    score *= brute_drive(&model, l, j, &acts[l], s);
                }
                if score > best_score {
                    best_score = score;
                    best = (j, s);
                }
            }
        }
        let p = model.infer(sample).unwrap();
        assert_eq!((p.map, p.neuron), best);
        assert_eq!(Some(p.class), model.labels()[best.0][best.1]);
    }
}

#[test]
fn synthetic_classes_are_nearest_centroid_separable() {
    let spec = SynthSpec {
        classes: 4,
        dims: vec![8, 3],
        samples_per_class: 25,
        noise_sigma: vec![0.01],
        seed: 77,
    };
    let data = synth_multimodal(&spec).unwrap();
    let mut centroids = vec![vec![0.0; 11]; 4];
    let mut counts = [0usize; 4];
    for i in 0..data.len() {
        let c = data.classes()[i] as usize;
        let v: Vec<f64> = data.sample(i).concat();
        centroids[c].iter_mut().zip(&v).for_each(|(m, x)| *m += x);
        counts[c] += 1;
    }
    for (m, n) in centroids.iter_mut().zip(counts) {
        m.iter_mut().for_each(|x| *x /= n as f64);
    }
    for i in 0..data.len() {
        let v: Vec<f64> = data.sample(i).concat();
        let nearest = (0..4)
            .min_by(|&a, &b| dist(&v, &centroids[a]).total_cmp(&dist(&v, &centroids[b])))
            .unwrap();
        assert_eq!(nearest, data.classes()[i] as usize);
    }
}

#[test]
fn split_fraction_of_sixty_thousand() {
    let spec = SynthSpec {
        classes: 10,
        dims: vec![1],
        samples_per_class: 6000,
        noise_sigma: vec![0.0],
        seed: 0,
    };
    let d = split(synth_multimodal(&spec).unwrap(), 0.08, 0.0, 1).unwrap();
    assert_eq!(d.splits().train.len(), 60000);
    assert_eq!(d.splits().labeling.len(), 4800);
}
