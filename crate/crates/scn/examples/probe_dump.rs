// scratch probe: dump detected primitives for offline schema design
use std::io::Write;
use std::path::Path;

use scn::data::{load_mnist, subsample, SampleSpec};
use scn::vision::{detect_primitives_mnist, GrayImage, MnistPipelineConfig, PrimitiveKind};

fn dump(ds: &scn::data::Dataset, pipe: &MnistPipelineConfig, path: &str) {
    let mut out = std::fs::File::create(path).unwrap();
    for i in 0..ds.len() {
        let img = GrayImage::new(28, 28, ds.image_data(i).to_vec()).unwrap();
        let prims = detect_primitives_mnist(&img, pipe);
        write!(out, "{}", ds.labels[i]).unwrap();
        for p in &prims {
            let k = match p.kind {
                PrimitiveKind::ClosedContour => 'c',
                PrimitiveKind::Line => 'l',
                PrimitiveKind::Arc => 'a',
                _ => '?',
            };
            write!(out, ";{}", k).unwrap();
            for v in &p.props {
                write!(out, ",{:.2}", v).unwrap();
            }
        }
        writeln!(out).unwrap();
    }
}

fn main() {
    let train = load_mnist(Path::new("data/mnist"), "train").unwrap();
    let test = load_mnist(Path::new("data/mnist"), "test").unwrap();
    let train = subsample(&train, SampleSpec::Count(12000), 1).unwrap();
    let test = subsample(&test, SampleSpec::Count(4000), 2).unwrap();
    let pipe = MnistPipelineConfig::default();
    dump(&train, &pipe, "/tmp/prims_train.csv");
    dump(&test, &pipe, "/tmp/prims_test.csv");
    println!("dumped");
}
