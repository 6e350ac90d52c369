//! Temporary pilot for tuning the deep-image-prior desk configuration.

use segreg_core::energy::EnergyParams;
use segreg_core::geodesic::{geodesic_distance, normalize_distance, GeodesicConfig, MarkerSet};
use segreg_core::image::SliceStack;
use segreg_core::metrics;
use segreg_core::nnet::NetConfig;
use segreg_core::optim::{run_dip, RunConfig, RunMode};
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
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(200);
    let dropout: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let max_disp: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let n_seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);

    let start = std::time::Instant::now();
    let mut rels = vec![];
    let mut nccs = vec![];
    let mut dices = vec![];
    for seed in 0..n_seeds {
        let inst = desk_instance(seed);
        let t = histogram_match(&inst.template, &inst.reference);
        let markers = MarkerSet::new(vec![inst.marker_point()]).unwrap();
        let d0 = geodesic_distance(&t, &markers, &GeodesicConfig::default()).unwrap();
        let d = normalize_distance(&d0);
        let cfg = RunConfig {
            mode: RunMode::Dip,
            epochs,
            lr1: lr,
            lr2: lr,
            checkpoint_epochs: vec![],
            seed,
            desk_scale: true,
        };
        let netcfg = NetConfig {
            dropout_rate: dropout,
            max_disp,
            ..NetConfig::desk()
        };
        let outs = run_dip(
            &SliceStack::single(t.clone()),
            &SliceStack::single(inst.reference.clone()),
            &SliceStack::single(d),
            &[markers],
            Some(&SliceStack::single(inst.mask_true.clone())),
            &EnergyParams::default(),
            &cfg,
            &netcfg,
        )
        .unwrap();
        let out = &outs[0];
        let row =
            metrics::evaluate(&t, &inst.reference, &out.u, &out.theta_r, &inst.mask_true).unwrap();
        let hard = out.theta_r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let (f1h, _, _) = metrics::f1_hard(&hard, &inst.mask_true, 0.5).unwrap();
        println!(
            "seed {seed}: relSSD {:.3} ncc {:.3} dice_hard {:.3} |u|mean {:.2} E0 {:.3} Eend {:.3}",
            row.rel_ssd,
            row.ncc,
            f1h,
            out.u.mean_magnitude(),
            out.history[0].total,
            out.history.last().unwrap().total
        );
        rels.push(row.rel_ssd);
        nccs.push(row.ncc);
        dices.push(f1h);
    }
    println!(
        "lr {lr} epochs {epochs} dropout {dropout} max_disp {max_disp} | median relSSD {:.3} ncc {:.3} dice {:.3} | {:.1}s",
        median(rels),
        median(nccs),
        median(dices),
        start.elapsed().as_secs_f64()
    );
}
