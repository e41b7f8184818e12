// scratch probe: tree-only accuracy on real data (will be replaced)
use std::path::Path;
use std::time::Instant;

use scn::data::{load_mnist, subsample, SampleSpec};
use scn::relation::RelationSchema;
use scn::training::{relation_vectors_mnist, tree_probabilities};
use scn::tree::{argmax, build_templates};
use scn::vision::MnistPipelineConfig;

fn main() {
    let dir = Path::new("data/mnist");
    let t0 = Instant::now();
    let train = load_mnist(dir, "train").unwrap();
    let test = load_mnist(dir, "test").unwrap();
    println!("loaded {} train, {} test in {:?}", train.len(), test.len(), t0.elapsed());

    let train_n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10000);
    let test_n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let train = subsample(&train, SampleSpec::Count(train_n), 1).unwrap();
    let test = subsample(&test, SampleSpec::Count(test_n), 2).unwrap();

    let schema = RelationSchema::default_mnist();
    let pipe = MnistPipelineConfig::default();

    let t0 = Instant::now();
    let train_vecs = relation_vectors_mnist(&train, &pipe, &schema).unwrap();
    println!("train detection: {:?} ({:.2} ms/img)", t0.elapsed(), t0.elapsed().as_millis() as f64 / train.len() as f64);

    let ones: f64 = train_vecs.iter().map(|v| v.count_ones() as f64).sum::<f64>() / train_vecs.len() as f64;
    println!("mean active bits per vector: {:.2} / 127", ones);

    let samples: Vec<_> = train_vecs.into_iter().zip(train.labels.iter().map(|&l| l as usize)).collect();
    let dict = build_templates(&samples, 10).unwrap();

    let t0 = Instant::now();
    let test_vecs = relation_vectors_mnist(&test, &pipe, &schema).unwrap();
    println!("test detection: {:?}", t0.elapsed());
    let probs = tree_probabilities(&test_vecs, &dict).unwrap();
    let correct = probs
        .iter()
        .zip(&test.labels)
        .filter(|(p, &l)| argmax(p) == l as usize)
        .count();
    println!("tree-only accuracy: {:.4} ({}/{})", correct as f64 / test.len() as f64, correct, test.len());

    // per-class accuracy
    let mut per_class = vec![(0usize, 0usize); 10];
    for (p, &l) in probs.iter().zip(&test.labels) {
        per_class[l as usize].1 += 1;
        if argmax(p) == l as usize {
            per_class[l as usize].0 += 1;
        }
    }
    for (c, (hit, total)) in per_class.iter().enumerate() {
        println!("  class {}: {:.3}", c, *hit as f64 / *total as f64);
    }

    // confusion: what the weak classes become
    let mut confusion = vec![vec![0usize; 10]; 10];
    for (p, &l) in probs.iter().zip(&test.labels) {
        confusion[l as usize][argmax(p)] += 1;
    }
    for c in [2usize, 3, 4] {
        let row: Vec<String> = confusion[c].iter().map(|v| format!("{:4}", v)).collect();
        println!("  true {} -> {}", c, row.join(""));
    }

    // primitive-kind histogram per class on train
    use scn::vision::{detect_primitives_mnist, GrayImage, PrimitiveKind};
    let mut kind_stats = vec![[0usize; 3]; 10];
    let mut counts = vec![0usize; 10];
    for i in 0..train.len().min(3000) {
        let img = GrayImage::new(28, 28, train.image_data(i).to_vec()).unwrap();
        let prims = detect_primitives_mnist(&img, &pipe);
        let l = train.labels[i] as usize;
        counts[l] += 1;
        for p in &prims {
            match p.kind {
                PrimitiveKind::ClosedContour => kind_stats[l][0] += 1,
                PrimitiveKind::Line => kind_stats[l][1] += 1,
                PrimitiveKind::Arc => kind_stats[l][2] += 1,
                _ => {}
            }
        }
    }
    println!("  mean primitives per image (contour, line, arc):");
    for c in 0..10 {
        let n = counts[c] as f64;
        println!("    class {}: {:.2} {:.2} {:.2}", c,
            kind_stats[c][0] as f64 / n, kind_stats[c][1] as f64 / n, kind_stats[c][2] as f64 / n);
    }
}
