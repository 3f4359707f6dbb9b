//! Scratch probe for acceptance-scale training and evaluation budgets.

use navsim::config::parse_config;
use navsim::runner::run_eval;
use navsim::training::{run_train_high, run_train_low};
use std::time::Instant;

const UTRAP: &str = "bounds 0 0 8 6\nrobot 1.5 3.0 0\ngoal 6.5 3.0\n\
wall 3.2 2.1 5.2 2.1\nwall 5.2 2.1 5.2 3.9\nwall 3.2 3.9 5.2 3.9\n\
horizon 600\ndt 0.1\n";

const PED_ARENA: &str = "bounds 0 0 8 8\nrobot 1.0 4.0 0\ngoal 7.0 4.0\n\
ped 3.0 1.5 3.0 6.5 1.0\nped_wp 3.0 1.5\n\
ped 4.0 6.5 4.0 1.5 1.0\nped_wp 4.0 6.5\n\
ped 5.0 1.5 5.0 6.5 1.0\nped_wp 5.0 1.5\n\
ped 6.0 6.5 6.0 1.5 1.0\nped_wp 6.0 6.5\n\
ped 2.5 6.0 2.5 2.0 1.0\nped_wp 2.5 6.0\n\
ped 5.5 2.0 5.5 6.0 1.0\nped_wp 5.5 2.0\n\
horizon 600\ndt 0.1\n";

const ROOT: &str = "/tmp/accept_probe";

fn main() {
    std::fs::create_dir_all(ROOT).unwrap();
    let utrap = format!("{ROOT}/utrap.scn");
    let arena = format!("{ROOT}/arena.scn");
    std::fs::write(&utrap, UTRAP).unwrap();
    std::fs::write(&arena, PED_ARENA).unwrap();
    let which = std::env::args().nth(1).unwrap_or_default();
    let t0 = Instant::now();
    match which.as_str() {
        "low_full" => {
            let cfg = parse_config(&format!(
                "[run]\nseed = 5\nout_dir = \"{ROOT}/low\"\n\n\
                 [cpo]\nupdates = 300\nsteps_per_update = 1024\ncheckpoint_every = 25\n"
            ))
            .unwrap();
            let res = run_train_low(&cfg).unwrap();
            println!("low_full done in {:.0}s", t0.elapsed().as_secs_f64());
            for r in res.curve.iter().rev().take(8) {
                println!(
                    "  upd {} reward {:.2} cost {:.3} kl {:.5} accepted {}",
                    r.update, r.mean_reward, r.mean_cost, r.kl, r.accepted
                );
            }
        }
        "high_full" => {
            let cfg = parse_config(&format!(
                "[run]\nseed = 5\nscenario = \"{utrap}\"\nout_dir = \"{ROOT}/high\"\n\n\
                 [reward]\nmu = 10.0\n\n\
                 [dqn]\nepisodes = 600\nwarmup = 400\nbatch_size = 32\n\
                 buffer_capacity = 60000\nlr = 5e-4\ngamma = 0.95\neps_end = 0.05\n\
                 eps_decay_steps = 4000\ntarget_sync = 400\ntrain_every = 1\n\
                 train_repeats = 2\nher_k = 4\ncheckpoint_every = 100\n"
            ))
            .unwrap();
            let res = run_train_high(&cfg).unwrap();
            println!("high_full done in {:.0}s", t0.elapsed().as_secs_f64());
            let k = res.curve.len();
            let succ = |a: usize, b: usize| {
                res.curve[a..b]
                    .iter()
                    .filter(|r| r.steps_to_goal < 600)
                    .count()
            };
            println!(
                "  first100 succ {} last100 succ {}",
                succ(0, 100.min(k)),
                succ(k.saturating_sub(100), k)
            );
        }
        "eval_utrap" => {
            for mode in ["hier", "flat"] {
                let high = if mode == "hier" {
                    format!("high_checkpoint = \"{ROOT}/high/high.ck\"\n")
                } else {
                    String::new()
                };
                let cfg = parse_config(&format!(
                    "[run]\nseed = 99\nscenario = \"{utrap}\"\nout_dir = \"{ROOT}/eval_{mode}\"\n\
                     low_checkpoint = \"{ROOT}/low/low.ck\"\n{high}"
                ))
                .unwrap();
                let out = run_eval(&cfg, 50).unwrap();
                println!(
                    "{mode}: sr {:.0} srn {:.0} ct {:.2} spl {:.1} oracle_calls {} ({:.0}s)",
                    out.report.sr,
                    out.report.srn,
                    out.report.ct,
                    out.report.spl,
                    out.runtime_oracle_calls,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "eval_ped" => {
            for speed in ["0.5", "0.8", "1.2"] {
                let cfg = parse_config(&format!(
                    "[run]\nseed = 99\nscenario = \"{arena}\"\nout_dir = \"{ROOT}/ped_{speed}\"\n\
                     low_checkpoint = \"{ROOT}/low/low.ck\"\n\
                     high_checkpoint = \"{ROOT}/high/high.ck\"\n\n\
                     [sfm]\ndesired_speed_override = {speed}\n\n[safety]\nenabled = false\n"
                ))
                .unwrap();
                let out = run_eval(&cfg, 100).unwrap();
                println!(
                    "speed {speed}: sr {:.0} srn {:.0} ct {:.2} ({:.0}s)",
                    out.report.sr,
                    out.report.srn,
                    out.report.ct,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        other => {
            eprintln!("unknown probe: {other}");
            std::process::exit(2);
        }
    }
}
