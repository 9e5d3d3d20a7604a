use std::time::Instant;
use bir_core::degradation::{degrade, sample_plan};
use bir_core::imaging::psnr;
use bir_core::imaging::synth::{synth_dataset, DatasetSpec, Generator};
use bir_core::numerics::DetRng;
use bir_core::restoration::{train_restoration, RestorationConfig, RestorationNet, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let decay_at: usize = iters * 3 / 4;

    let data = synth_dataset(&DatasetSpec { count: 64, size: 32, generator: Generator::Mixed, seed: 9 }).unwrap();
    let (train, held) = data.split_at(56);
    let mut net = RestorationNet::new(RestorationConfig::default(), lr, 1).unwrap();
    let t0 = Instant::now();
    let r1 = train_restoration(&mut net, train, &TrainOptions {
        iterations: decay_at, batch, seed: 5, ..Default::default()
    }).unwrap();
    net.store.set_learning_rate(lr * 0.3);
    let r2 = train_restoration(&mut net, train, &TrainOptions {
        iterations: iters - decay_at, batch, seed: 5, start_iteration: decay_at, ..Default::default()
    }).unwrap();
    println!("{} iters in {:.0}s", iters, t0.elapsed().as_secs_f64());
    let all: Vec<f32> = r1.losses.iter().chain(&r2.losses).map(|&(_, l)| l).collect();
    for chunk in all.chunks(iters / 8) {
        println!("mean loss {:.5}", chunk.iter().sum::<f32>() / chunk.len() as f32);
    }
    let mut base_sum = 0.0; let mut reg_sum = 0.0; let mut count = 0.0;
    for (i, hq) in held.iter().enumerate() {
        for rep in 0..4 {
            let mut rng = DetRng::new(7777, (i * 4 + rep) as u64);
            let plan = sample_plan(&mut rng, false, (hq.height, hq.width));
            let lq = degrade(hq, &plan).unwrap();
            let reg = net.forward(&lq).unwrap();
            base_sum += psnr(&lq, hq).unwrap();
            reg_sum += psnr(&reg, hq).unwrap();
            count += 1.0;
        }
    }
    println!("held-out: lq {:.2} dB, reg {:.2} dB, gain {:.2} dB",
        base_sum / count, reg_sum / count, (reg_sum - base_sum) / count);
}
