use bir_core::degradation::{degrade, sample_plan};
use bir_core::imaging::psnr;
use bir_core::imaging::synth::{synth_dataset, DatasetSpec, Generator};
use bir_core::numerics::DetRng;
use bir_core::restoration::{train_restoration, RestorationConfig, RestorationNet, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr0: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let data = synth_dataset(&DatasetSpec { count: 64, size: 32, generator: Generator::Mixed, seed: 9 }).unwrap();
    let (train, held) = data.split_at(56);
    let mut net = RestorationNet::new(RestorationConfig::default(), lr0, 1).unwrap();

    let stage = |net: &mut RestorationNet, from: usize, to: usize, lr: f32| {
        net.store.set_learning_rate(lr);
        train_restoration(net, train, &TrainOptions {
            iterations: to - from, batch, seed: 5, start_iteration: from, ..Default::default()
        }).unwrap();
    };
    let p60 = total * 60 / 100;
    let p85 = total * 85 / 100;
    stage(&mut net, 0, p60, lr0);
    stage(&mut net, p60, p85, lr0 * 0.3);
    stage(&mut net, p85, total, lr0 * 0.1);

    let mut base = 0.0; let mut reg_s = 0.0; let mut n = 0.0;
    let mut mild_gain = 0.0f64; let mut mild_n = 0.0f64;
    for (i, hq) in held.iter().enumerate() {
        for rep in 0..4u64 {
            let mut rng = DetRng::new(7777, i as u64 * 4 + rep);
            let plan = sample_plan(&mut rng, false, (hq.height, hq.width));
            let lq = degrade(hq, &plan).unwrap();
            let reg = net.forward(&lq).unwrap();
            let pl = psnr(&lq, hq).unwrap();
            let pr = psnr(&reg, hq).unwrap();
            base += pl; reg_s += pr; n += 1.0;
            if pl > 25.0 { mild_gain += pr - pl; mild_n += 1.0; }
        }
    }
    println!("iters {total} batch {batch} lr {lr0}: held-out gain {:+.2} dB (mild-case gain {:+.2})",
        (reg_s - base) / n, mild_gain / mild_n.max(1.0));
}
