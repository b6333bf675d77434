//! Times one desk-scale forward+backward pass on an 8-image batch.

use std::time::Instant;

use irnet::arch::{build_model, render_shape_table, ModelConfig};
use irnet::Tensor;

fn main() -> irnet::Result<()> {
    let cfg = ModelConfig::desk();
    let mut model = build_model(&cfg)?;
    print!("{}", render_shape_table(&model.shape_table()?));
    let s = cfg.input_size;
    let batch = Tensor::from_fn(vec![8, s, s, 3], |i| ((i * 7919) % 255) as f32 / 255.0);
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    for _ in 0..3 {
        let t = Instant::now();
        let loss = model.loss_and_grads(&batch, &labels, 0)?;
        println!("loss {loss:.4} in {:.3}s", t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    model.predict(&batch)?;
    println!("predict {:.3}s", t.elapsed().as_secs_f64());
    Ok(())
}
