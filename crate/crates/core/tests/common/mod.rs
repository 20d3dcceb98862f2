use despeckle::model::{init_model_as, ModelConfig, ModelParameters};
use despeckle::train::{item_objective, PathOptions};
use despeckle::{data, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

pub fn tiny_config(block_norm: bool) -> ModelConfig {
    ModelConfig {
        base_width: 2,
        stage_widths: vec![2, 3, 4, 5],
        stage_blocks: vec![1, 1, 1, 1],
        recon_blocks: 2,
        latent_channels: 2,
        block_norm,
        ..ModelConfig::default()
    }
}

fn total(params: &ModelParameters<f64>, y: &ImageTensor, opts: PathOptions) -> f64 {
    item_objective(params, y, 0.05, 11, opts, 1.0).unwrap().0.total
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub which: String,
}

/// Central differences on one coordinate of every parameter array plus
/// random extras on an 8x8 input.
pub fn gradient_check(block_norm: bool, opts: PathOptions) -> GradCheck {
    let mut params = init_model_as::<f64>(&tiny_config(block_norm), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // move biases and norm shifts off their zero init
    for v in params.values.iter_mut() {
        v.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    }
    let y = data::synthetic_shapes(1, 8, 9).remove(0);
    let (_, grads) = item_objective(&params, &y, 0.05, 11, opts, 1.0).unwrap();

    let mut coords: Vec<(usize, usize)> = (0..params.values.len())
        .map(|i| (i, rng.random_range(0..params.values[i].len())))
        .collect();
    while coords.len() < 64 {
        let i = rng.random_range(0..params.values.len());
        coords.push((i, rng.random_range(0..params.values[i].len())));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = (0.0, String::new());
    for &(i, j) in &coords {
        let orig = params.values[i][j];
        params.values[i][j] = orig + H;
        let up = total(&params, &y, opts);
        params.values[i][j] = orig - H;
        let down = total(&params, &y, opts);
        params.values[i][j] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads[i][j];
        let scale = numeric.abs().max(analytic.abs()).max(1e-8);
        let rel = (numeric - analytic).abs() / scale;
        if rel > worst.0 {
            worst = (rel, format!("{}[{j}] analytic {analytic:e} numeric {numeric:e}", names[i]));
        }
    }
    GradCheck { checked: coords.len(), worst: worst.0, which: worst.1 }
}
