//! Scratch driver for hyperparameter probing (not part of the pipeline).

use std::time::Instant;

use progdiff_core::pipeline::*;
use progdiff_core::policy::GuidanceConfig;

fn main() {
    let mut cfg = RunConfig::default();
    let args: Vec<String> = std::env::args().skip(1).collect();
    for a in &args {
        let (k, v) = a.split_once('=').expect("args as key=value");
        cfg.set(k, v).expect("valid config key");
    }
    println!("config fingerprint {}", cfg.fingerprint());

    let t0 = Instant::now();
    let encoder = progdiff_core::encoder::Encoder::frozen();
    let demos = make_demos(&cfg).unwrap();
    let data = DemoSet::encode(&encoder, demos).unwrap();
    println!("[{:.1?}] demos: {}", t0.elapsed(), data.demos.len());

    let (world0, wstats) = train_world(&cfg, &data).unwrap();
    println!(
        "[{:.1?}] world loss {:.4} -> {:.4} (ratio {:.1})",
        t0.elapsed(),
        wstats.first_epoch_loss,
        wstats.last_epoch_loss,
        wstats.first_epoch_loss / wstats.last_epoch_loss
    );

    let (prog0, pstats) = train_progress(&cfg, &data).unwrap();
    println!(
        "[{:.1?}] progress loss {:.4} -> {:.4}",
        t0.elapsed(),
        pstats.first_epoch_loss,
        pstats.last_epoch_loss
    );

    let heldout = DemoSet::encode(&encoder, make_heldout_demos(&cfg).unwrap()).unwrap();
    let (mae0, pear0) = estimator_quality(&prog0, &heldout).unwrap();
    println!("held-out estimator before joint ft: mae {mae0:.4} pearson {pear0:.4}");

    let (world, prog, jstats) = joint_finetune(&cfg, &data, &world0, &prog0).unwrap();
    println!(
        "[{:.1?}] joint loss {:.4} -> {:.4}",
        t0.elapsed(),
        jstats.first_epoch_loss,
        jstats.last_epoch_loss
    );
    let (mae1, pear1) = estimator_quality(&prog, &heldout).unwrap();
    println!("held-out estimator after joint ft: mae {mae1:.4} pearson {pear1:.4}");
    let (id_err, mv_err) = world_recon_split(&world, &heldout).unwrap();
    println!("world recon: identity {id_err:.5} vs moving {mv_err:.5}");

    let out = train_policy(&cfg, &data, &world).unwrap();
    println!(
        "[{:.1?}] latent diff loss {:.3} -> {:.3}; action {:.3} -> {:.3}",
        t0.elapsed(),
        out.latent_stats.first_epoch_loss,
        out.latent_stats.last_epoch_loss,
        out.action_stats.first_epoch_loss,
        out.action_stats.last_epoch_loss
    );

    let stack = TrainedStack { encoder, world, prog, policy: out.nets };

    let n_eval = cfg.episodes;
    let (_, unguided) = rollout_eval(&cfg, &stack, &GuidanceConfig::off(), n_eval, "probe-eval").unwrap();
    println!(
        "[{:.1?}] unguided: pearson {:.3} mae {:.3} stop {:.3} steps {:.2} success {:.3}",
        t0.elapsed(),
        unguided.pearson_r,
        unguided.mae,
        unguided.stop_reliability,
        unguided.avg_steps,
        unguided.success_rate
    );
    let (_, guided) = rollout_eval(
        &cfg,
        &stack,
        &GuidanceConfig::epsilon_space(cfg.alpha),
        n_eval,
        "probe-eval",
    )
    .unwrap();
    println!(
        "[{:.1?}] guided eps: pearson {:.3} mae {:.3} stop {:.3} steps {:.2} success {:.3}",
        t0.elapsed(),
        guided.pearson_r,
        guided.mae,
        guided.stop_reliability,
        guided.avg_steps,
        guided.success_rate
    );
}
