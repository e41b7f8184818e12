// scratch probe: per-class primitive geometry distributions (will be removed)
use std::path::Path;

use scn::data::{load_mnist, subsample, SampleSpec};
use scn::vision::{detect_primitives_mnist, GrayImage, MnistPipelineConfig, PrimitiveKind};

fn quantiles(mut v: Vec<f64>) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
    format!("{:.1}/{:.1}/{:.1}", q(0.25), q(0.5), q(0.75))
}

fn main() {
    let train = load_mnist(Path::new("data/mnist"), "train").unwrap();
    let train = subsample(&train, SampleSpec::Count(6000), 1).unwrap();
    let pipe = MnistPipelineConfig::default();

    let mut l1_len = vec![Vec::new(); 10];
    let mut l1_ang = vec![Vec::new(); 10];
    let mut a1_chord = vec![Vec::new(); 10];
    let mut a1_sm = vec![Vec::new(); 10];
    let mut c1_major = vec![Vec::new(); 10];
    let mut n_prims = vec![Vec::new(); 10];
    for i in 0..train.len() {
        let img = GrayImage::new(28, 28, train.image_data(i).to_vec()).unwrap();
        let prims = detect_primitives_mnist(&img, &pipe);
        let l = train.labels[i] as usize;
        n_prims[l].push(prims.len() as f64);
        let mut seen_line = false;
        let mut seen_arc = false;
        let mut seen_c = false;
        for p in &prims {
            match p.kind {
                PrimitiveKind::Line if !seen_line => {
                    seen_line = true;
                    l1_len[l].push(p.props[4]);
                    l1_ang[l].push(p.props[5]);
                }
                PrimitiveKind::Arc if !seen_arc => {
                    seen_arc = true;
                    let chord = (p.props[4] - p.props[0]).hypot(p.props[5] - p.props[1]);
                    a1_chord[l].push(chord);
                    a1_sm[l].push((p.props[2] - p.props[0]).hypot(p.props[3] - p.props[1]));
                }
                PrimitiveKind::ClosedContour if !seen_c => {
                    seen_c = true;
                    c1_major[l].push(p.props[2]);
                }
                _ => {}
            }
        }
    }
    println!("class | #prims | l1len q25/50/75 | l1ang | a1chord | a1 s-m | c1major");
    for c in 0..10 {
        println!(
            "  {} | {} | {} | {} | {} | {} | {}",
            c,
            quantiles(n_prims[c].clone()),
            quantiles(l1_len[c].clone()),
            quantiles(l1_ang[c].clone()),
            quantiles(a1_chord[c].clone()),
            quantiles(a1_sm[c].clone()),
            quantiles(c1_major[c].clone()),
        );
    }
}
