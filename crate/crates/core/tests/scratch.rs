use maskreg::cohortstats::dice;
use maskreg::phantom::{make_reference, make_subject, DeformationSpec, PhantomSpec};
use maskreg::register::{register, RegistrationConfig};
use maskreg::warp::warp_labels;

#[test]
fn probe_translation_recovery_speed() {
    let spec = PhantomSpec::new(
        [96, 64, 64],
        42,
        2,
        DeformationSpec::translation([3.0, -2.0, 4.0]),
        false,
    )
    .unwrap();
    let (fixed, labels) = make_reference(&spec).unwrap();
    let (moving, moving_labels, truth) = make_subject(&fixed, &labels, &spec).unwrap();
    let cfg = RegistrationConfig::default();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t0 = std::time::Instant::now();
    let out = pool.install(|| register(&fixed, &moving, &cfg)).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    // foreground mean displacement error
    let mut err_sum = 0.0;
    let mut count = 0usize;
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != 0 {
            let u = out.field.vectors()[i];
            let t = truth.vectors()[i];
            let e = ((u[0] - t[0]).powi(2) + (u[1] - t[1]).powi(2) + (u[2] - t[2]).powi(2)).sqrt();
            err_sum += e as f64;
            count += 1;
        }
    }
    let warped = warp_labels(&moving_labels, &out.field);
    let mut dsum = 0.0;
    let mut dn = 0;
    for label in labels.present_labels() {
        let d = dice(&labels, &warped, label).unwrap().unwrap();
        println!("label {label}: dice {d:.4}");
        dsum += d;
        dn += 1;
    }
    println!(
        "time {secs:.1}s, mean err {:.4} voxels, mean dice {:.4}",
        err_sum / count as f64,
        dsum / dn as f64
    );
    for lr in &out.report.levels {
        println!(
            "level {} dims {:?}: {} sweeps, accepted {:?}",
            lr.level, lr.dims, lr.sweeps, lr.accepted_moves
        );
    }
}
