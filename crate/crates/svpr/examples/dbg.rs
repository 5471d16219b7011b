use svpr::adapter::{Branch, BranchConfig, Placement};
use svpr::loss::{HashMode, LossConfig};
use svpr::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let bits: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(240);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4e-3);
    let beta: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(50.0);
    let alpha: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let dcfg = ToyDataConfig { noise, seed: 1, ..Default::default() };
    let data = ToyDataset::generate(&dcfg).unwrap();
    for mode in [HashMode::Direct, HashMode::Sc, HashMode::Ste, HashMode::ScSte] {
        let bcfg = BranchConfig {
            dim: 16, blocks: 2, grid: (4, 4),
            placement: Placement::Dense,
            proj_dim: 16, out_dim: bits, init_std: 0.05, seed: 1,
        };
        let mut branch = Branch::init(bcfg).unwrap();
        let tcfg = ToyTrainConfig {
            mode, steps,
            places_per_batch: 10, images_per_place: 4,
            loss: LossConfig { ms_beta: beta, ms_alpha: alpha, ..Default::default() },
            adam: AdamConfig { lr, ..Default::default() },
            halve_every_epochs: 1000, seed: 1,
        };
        let mut first = 0.0; let mut last = 0.0; let mut n = 0;
        train_toy(&data, &mut branch, &tcfg, |m| {
            if n < 10 { first += m.loss / 10.0; }
            if n >= steps - 10 { last += m.loss / 10.0; }
            n += 1;
        }).unwrap();
        let dbd = extract_descriptors(&branch, &data.train_feats).unwrap();
        let qd = extract_descriptors(&branch, &data.query_feats).unwrap();
        let f_r1 = float_recall_at_1(&dbd, &data.train_labels, &qd, &data.query_labels).unwrap();
        let dbc = extract_codes(&branch, &data.train_feats).unwrap();
        let qc = extract_codes(&branch, &data.query_feats).unwrap();
        let b_r1 = binary_recall_at_1(&dbc, &data.train_labels, &qc, &data.query_labels).unwrap();
        println!("{:8} loss {first:.3}->{last:.3}  floatR1={f_r1:.3} binR1={b_r1:.3}", mode.label());
    }
}
