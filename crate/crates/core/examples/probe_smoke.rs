use navsim::config::parse_config;
use navsim::high_policy::init_nets;
use navsim::training::train_high;
use navsim::world::load_scenario;
use std::time::Instant;

fn main() {
    let spec = load_scenario(
        "bounds 0 0 5 5\nrobot 1.0 2.5 0\ngoal 3.0 2.5\nhorizon 150\ndt 0.1\n",
    )
    .unwrap();
    let cfg = parse_config(
        "
[run]
seed = 21
[reward]
mu = 10.0
[dqn]
episodes = 200
warmup = 200
batch_size = 32
buffer_capacity = 20000
lr = 5e-4
gamma = 0.95
eps_end = 0.01
eps_decay_steps = 600
target_sync = 400
train_every = 1
train_repeats = 4
her_k = 4
",
    )
    .unwrap();
    let t0 = Instant::now();
    let res = train_high(&cfg, &spec, init_nets(cfg.run.seed), None).unwrap();
    let el = t0.elapsed().as_secs_f64();
    {
        let mut f = std::fs::File::create("/tmp/probe_high.ck").unwrap();
        res.online.params.save(&mut f).unwrap();
    }
    let mean = |lo: usize, hi: usize| {
        res.curve[lo..hi]
            .iter()
            .map(|r| r.steps_to_goal as f64)
            .sum::<f64>()
            / (hi - lo) as f64
    };
    println!("elapsed {:.1}s", el);
    println!("first50 {:.1} last50 {:.1}", mean(0, 50), mean(150, 200));
    println!(
        "grad_steps {} total_env {}",
        res.online.params.step,
        res.curve.iter().map(|r| r.env_steps).sum::<usize>()
    );
    let succ_last: usize = res.curve[150..]
        .iter()
        .filter(|r| r.steps_to_goal < 150)
        .count();
    println!("last50 successes {}", succ_last);
    let succ_first: usize = res.curve[..50]
        .iter()
        .filter(|r| r.steps_to_goal < 150)
        .count();
    println!("first50 successes {}", succ_first);
    println!(
        "mean reward first50 {:.1} last50 {:.1}",
        res.curve[..50].iter().map(|r| r.ep_reward).sum::<f64>() / 50.0,
        res.curve[150..].iter().map(|r| r.ep_reward).sum::<f64>() / 50.0
    );

    // Inspect the Q landscape at the start state.
    {
        use navsim::congestion::{action_mask, SectorGrid, SubGoal};
        use navsim::high_policy::HighObs;
        use navsim::perception::{build_lomap, ObstacleMapStack};
        use navsim::runner::Sim;
        let grid = SectorGrid::default();
        let sfm = navsim::ped::SfmParams::default();
        let sim = Sim::from_scenario(&spec, &sfm, None);
        let scan = sim.scan();
        let stack = ObstacleMapStack::bootstrap(build_lomap(&scan));
        let pose = sim.robot.pose();
        let obs = HighObs {
            stack: stack.clone(),
            goal_polar: pose.to_polar(sim.goal),
        };
        let mask = action_mask(stack.newest(), &grid);
        let q = res.online.q_values(&obs);
        let mut idx: Vec<usize> = (0..q.len()).collect();
        idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap());
        println!("goal_polar = {:?}", obs.goal_polar);
        for &i in idx.iter().take(6) {
            let sg = SubGoal::from_sector(&grid, i, &pose);
            println!(
                "  top q[{}]={:.2} allowed={} world=({:.2},{:.2})",
                i, q[i], mask.allowed[i], sg.world_point.x, sg.world_point.y
            );
        }
        let n_allowed = mask.allowed.iter().filter(|&&a| a).count();
        println!("allowed {}/{}", n_allowed, q.len());
        // Sector that contains the goal itself.
        for i in 0..q.len() {
            let sg = SubGoal::from_sector(&grid, i, &pose);
            if sg.world_point.dist(sim.goal) < 0.25 {
                println!(
                    "  goalsector q[{}]={:.2} allowed={} world=({:.2},{:.2})",
                    i, q[i], mask.allowed[i], sg.world_point.x, sg.world_point.y
                );
            }
        }
    }

    // Trace greedy rollouts with the trained net.
    use navsim::congestion::{action_mask, should_update, SectorGrid, SubGoal, UpdateState};
    use navsim::high_policy::{masked_argmax, HighObs};
    use navsim::perception::{build_lomap, encode_obstacles, minpool, ObstacleMapStack};
    use navsim::runner::{LowController, ScriptedController, Sim};
    let grid = SectorGrid::default();
    let sfm = navsim::ped::SfmParams::default();
    for ep in 0..3 {
        println!("--- greedy ep {}", ep);
        let mut sim = Sim::from_scenario(&spec, &sfm, None);
        let mut update = UpdateState::default();
        let mut scan = sim.scan();
        update.observe(&scan);
        let mut stack = ObstacleMapStack::bootstrap(build_lomap(&scan));
        let mut scripted = ScriptedController::default();
        let mut steps = 0;
        let mut arrived = false;
        while steps < sim.horizon && !arrived {
            let pose = sim.robot.pose();
            let obs = HighObs {
                stack: stack.clone(),
                goal_polar: pose.to_polar(sim.goal),
            };
            let mask = action_mask(stack.newest(), &grid);
            let q = sim_q(&res.online, &obs);
            let a = masked_argmax(&q, &mask);
            let sg = SubGoal::from_sector(&grid, a, &pose);
            let d_goal_before = sim.robot.pos.dist(sim.goal);
            update.adopt(sg.clone(), sim.t);
            let seg_start = steps;
            loop {
                let sp = sim.robot.pose().to_polar(sg.world_point);
                let olist = encode_obstacles(&minpool(&scan), 3.0);
                let cmd = scripted.command(&olist, sp, sim.robot.v, sim.robot.omega);
                sim.apply(cmd, &sfm);
                steps += 1;
                scan = sim.scan();
                update.observe(&scan);
                stack = stack.push(build_lomap(&scan));
                if sim.robot.pos.dist(sim.goal) < 0.5 {
                    arrived = true;
                    break;
                }
                if steps >= sim.horizon || should_update(&update, sim.robot.pos, sim.t) {
                    break;
                }
            }
            println!(
                "  dec sector={} sg=({:.2},{:.2}) dgoal {:.2}->{:.2} seg {} thr {:.2}",
                a,
                sg.world_point.x,
                sg.world_point.y,
                d_goal_before,
                sim.robot.pos.dist(sim.goal),
                steps - seg_start,
                update.d_u
            );
        }
        println!("  arrived={} steps={}", arrived, steps);
    }
}

fn sim_q(net: &navsim::high_policy::QNet, obs: &navsim::high_policy::HighObs) -> Vec<f64> {
    net.q_values(obs)
}
