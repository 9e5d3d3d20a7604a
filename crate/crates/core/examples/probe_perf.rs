use std::time::Instant;
use bir_core::imaging::synth::{synth_dataset, DatasetSpec, Generator};
use bir_core::nn::Binder;
use bir_core::numerics::Tape;
use bir_core::restoration::{synthesize_batch, RestorationConfig, RestorationNet};

fn main() {
    let data = synth_dataset(&DatasetSpec { count: 8, size: 32, generator: Generator::Mixed, seed: 9 }).unwrap();
    let net = RestorationNet::new(RestorationConfig::default(), 1e-3, 1).unwrap();

    let t0 = Instant::now();
    for it in 0..20 {
        let _ = synthesize_batch(&data, 4, 5, it, false).unwrap();
    }
    println!("batch synthesis: {:.3}s/iter", t0.elapsed().as_secs_f64() / 20.0);

    let (lq, hq) = synthesize_batch(&data, 4, 5, 0, false).unwrap();
    let t1 = Instant::now();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&net.store);
        let x = tape.input(&lq);
        let t = tape.input(&hq);
        let out = net.forward_var(&mut tape, &mut binder, x).unwrap();
        let _loss = tape.mse(out, t);
    }
    println!("forward only: {:.3}s/iter", t1.elapsed().as_secs_f64() / 20.0);

    let t2 = Instant::now();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&net.store);
        let x = tape.input(&lq);
        let t = tape.input(&hq);
        let out = net.forward_var(&mut tape, &mut binder, x).unwrap();
        let loss = tape.mse(out, t);
        tape.backward(loss).unwrap();
        binder.harvest(&tape, &mut net.store.clone());
    }
    println!("forward+backward: {:.3}s/iter", t2.elapsed().as_secs_f64() / 20.0);
}
