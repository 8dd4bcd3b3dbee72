use tatsearch::config::RunConfig;
use tatsearch::model::SearchModel;
use tatsearch::synthgen::{Dataset, Split};
use tatsearch::tensor::load_params;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or("/tmp/exp2/r1".into());
    let data = std::env::args().nth(2).unwrap_or("/tmp/exp2/data".into());
    let classes: usize = std::env::args().nth(3).unwrap_or("25".into()).parse().unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset_dir = data.clone();
    cfg.classes = classes;
    let model = SearchModel::from_params(cfg.model_config(classes), load_params(std::path::Path::new(&format!("{dir}/model.tat"))).unwrap()).unwrap();
    let ds = Dataset::load(std::path::Path::new(&data)).unwrap();
    // Codes from detections on train images (like gallery extraction)
    let mut all_codes: Vec<Vec<f64>> = vec![];
    for rec in ds.split(Split::Train) {
        let img = ds.load_image(rec).unwrap();
        let dets = model.detect(&img.image, 0.5).unwrap();
        for c in model.embed(&img.image, &dets).unwrap() {
            all_codes.push(c.values().to_vec());
        }
    }
    let n = all_codes.len();
    let len = all_codes[0].len();
    let total = n * len;
    let outside = all_codes.iter().flatten().filter(|&&v| v < 0.2 || v > 0.8).count();
    println!("activations outside [0.2,0.8]: {:.3} ({} codes)", outside as f64 / total as f64, n);
    let mut balanced = 0;
    for k in 0..len {
        let fire = all_codes.iter().filter(|c| c[k] >= 0.5).count() as f64 / n as f64;
        if (0.35..=0.65).contains(&fire) { balanced += 1; }
    }
    println!("bits with fire rate in [0.35,0.65]: {:.3}", balanced as f64 / len as f64);
}
