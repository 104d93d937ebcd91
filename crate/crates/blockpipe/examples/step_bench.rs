use blockpipe::diffusion::BlockLayout;
use blockpipe::model::{init_weights, ModelBundle, ModelConfig};
use blockpipe::taskbench::{TaskFamily, TaskSpec, TokenizerConfig};
use blockpipe::training::*;
use std::time::Instant;

fn main() {
    let mcfg = ModelConfig::default();
    let tok = TokenizerConfig::default();
    let task = TaskSpec::new(TaskFamily::Integrate, 16, 7);
    let layout = BlockLayout::for_region(7, 16, 56).unwrap();
    let mut bundle = ModelBundle::base(init_weights(&mcfg, 1).unwrap());
    let episodes = make_episodes(&task, &tok, 1, 16).unwrap();
    let batch = make_uniform_batch(&episodes, mcfg.mask_token, 2).unwrap();

    // loss+grad timing
    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let _ = batch_loss_and_grad(&bundle, None, Regime::ActFinetune, &layout, &batch).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / reps as f64;
    println!("batch_loss_and_grad: {:.1} ms/step (batch 16)", per * 1e3);

    // forward-only timing (value)
    let t = Instant::now();
    for _ in 0..reps {
        let _ = loss_act_value(&bundle, &batch).unwrap();
    }
    println!("loss value only:     {:.1} ms (sequential batch)", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // full train_step
    let mut optim = OptimState::new(&bundle, TrainableSet::Base, 3e-4);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = train_step(&mut bundle, None, Regime::ActFinetune, &layout, &batch, &mut optim).unwrap();
    }
    println!("train_step:          {:.1} ms/step", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
