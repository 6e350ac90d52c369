//! Temporary pilot for tuning the direct-mode desk configuration.

use segreg_core::energy::EnergyParams;
use segreg_core::geodesic::{geodesic_distance, normalize_distance, GeodesicConfig, MarkerSet};
use segreg_core::metrics;
use segreg_core::optim::{run_direct, RunConfig, RunMode};
use segreg_core::phantom::desk_instance;
use segreg_core::preprocess::histogram_match;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr1: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let lr2: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let matchhist: bool = args.get(4).map(|s| s == "1").unwrap_or(true);

    let start = std::time::Instant::now();
    let mut rels = vec![];
    let mut nccs = vec![];
    let mut dices = vec![];
    for seed in 0..10u64 {
        let inst = desk_instance(seed);
        let t = if matchhist {
            histogram_match(&inst.template, &inst.reference)
        } else {
            inst.template.clone()
        };
        let markers = MarkerSet::new(vec![inst.marker_point()]).unwrap();
        let d0 = geodesic_distance(&t, &markers, &GeodesicConfig::default()).unwrap();
        let d = normalize_distance(&d0);
        let cfg = RunConfig {
            mode: RunMode::Direct,
            epochs,
            lr1,
            lr2,
            checkpoint_epochs: vec![],
            seed,
            desk_scale: true,
        };
        let out = run_direct(
            &t,
            &inst.reference,
            &d,
            &markers,
            &EnergyParams::default(),
            &cfg,
            Some(&inst.mask_true),
        )
        .unwrap();
        let row = metrics::evaluate(&t, &inst.reference, &out.u, &out.theta_r, &inst.mask_true)
            .unwrap();
        let hard = out.theta_r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let (f1h, _, _) = metrics::f1_hard(&hard, &inst.mask_true, 0.5).unwrap();
        println!(
            "seed {seed}: relSSD {:.3} ncc {:.3} dice_soft {:.3} dice_hard {:.3} ngf {:.3} |u|mean {:.2}",
            row.rel_ssd, row.ncc, row.dice, f1h, row.ngf, out.u.mean_magnitude()
        );
        rels.push(row.rel_ssd);
        nccs.push(row.ncc);
        dices.push(f1h);
    }
    println!(
        "lr1 {lr1} lr2 {lr2} epochs {epochs} match {matchhist} | median relSSD {:.3} ncc {:.3} dice {:.3} | {:.1}s",
        median(rels),
        median(nccs),
        median(dices),
        start.elapsed().as_secs_f64()
    );
}
