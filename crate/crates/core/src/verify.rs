//! Double-precision gradient verification via central finite differences.
//!
//! Every differentiable operation, a composite pipeline, and the full
//! desk-scale network are checked over randomized small shapes. The suite
//! backs both the `gradcheck` CLI subcommand and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::ops;
use crate::tensor::{grad_check, Graph, Shape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-5;

/// Worst relative gradient error observed for one operation across all
/// seeds.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(2..=6),
        rng.gen_range(2..=6),
    )
}

struct Suite {
    seeds: u64,
    results: Vec<OpCheck>,
}

impl Suite {
    fn run(
        &mut self,
        name: &'static str,
        mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
    ) -> Result<()> {
        let mut worst = 0.0f64;
        for seed in 0..self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
            worst = worst.max(case(&mut rng)?);
        }
        self.results.push(OpCheck {
            name,
            max_rel_err: worst,
        });
        Ok(())
    }
}

/// Runs the whole verification suite with `seeds` random instances per
/// operation, returning per-op worst errors.
pub fn gradient_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    let mut suite = Suite {
        seeds,
        results: Vec::new(),
    };

    suite.run("ew_add", |rng| {
        let shape = random_shape(rng);
        let b = random_tensor(shape, rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let bv = g.constant(b.clone());
                let y = g.add(v, bv)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("ew_sub", |rng| {
        let shape = random_shape(rng);
        let b = random_tensor(shape, rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let bv = g.constant(b.clone());
                let y = g.sub(bv, v)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("ew_mul_broadcast", |rng| {
        let shape = random_shape(rng);
        let a = random_tensor(shape, rng);
        // Per-channel broadcast operand receives a summed gradient.
        let x = random_tensor(Shape::new(1, shape.c, 1, 1), rng);
        grad_check(
            |g, v| {
                let av = g.constant(a.clone());
                let y = g.mul(av, v)?;
                g.reduce_mean(y)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("reduce_mean", |rng| {
        let x = random_tensor(random_shape(rng), rng);
        grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("conv2d/input", |rng| {
        let shape = random_shape(rng);
        let co = rng.gen_range(1..=3);
        let w = random_tensor(Shape::new(co, shape.c, 3, 3), rng);
        let b = random_tensor(Shape::new(1, co, 1, 1), rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = ops::conv2d(g, v, wv, Some(bv), 1, 1)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("conv2d/weight", |rng| {
        let shape = random_shape(rng);
        let co = rng.gen_range(1..=3);
        let x = random_tensor(shape, rng);
        let w = random_tensor(Shape::new(co, shape.c, 3, 3), rng);
        grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let y = ops::conv2d(g, xv, v, None, 1, 1)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &w,
            EPS,
        )
    })?;

    suite.run("conv2d/bias", |rng| {
        let shape = random_shape(rng);
        let co = rng.gen_range(1..=3);
        let x = random_tensor(shape, rng);
        let w = random_tensor(Shape::new(co, shape.c, 3, 3), rng);
        let b = random_tensor(Shape::new(1, co, 1, 1), rng);
        grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let y = ops::conv2d(g, xv, wv, Some(v), 1, 1)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &b,
            EPS,
        )
    })?;

    suite.run("depthwise/input", |rng| {
        let shape = random_shape(rng);
        let w = random_tensor(Shape::new(shape.c, 1, 3, 3), rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let y = ops::depthwise_conv2d(g, v, wv, None, 1, 1)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("depthwise/weight", |rng| {
        let shape = random_shape(rng);
        let x = random_tensor(shape, rng);
        let w = random_tensor(Shape::new(shape.c, 1, 3, 3), rng);
        grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let y = ops::depthwise_conv2d(g, xv, v, None, 1, 1)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &w,
            EPS,
        )
    })?;

    suite.run("leaky_relu", |rng| {
        let x = random_tensor(random_shape(rng), rng);
        grad_check(
            |g, v| {
                let y = ops::leaky_relu(g, v, 0.2)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("sigmoid", |rng| {
        let x = random_tensor(random_shape(rng), rng);
        grad_check(
            |g, v| {
                let y = ops::sigmoid(g, v)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("global_avg_pool", |rng| {
        let x = random_tensor(random_shape(rng), rng);
        grad_check(
            |g, v| {
                let y = ops::global_avg_pool(g, v)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    fn se_weights(
        c: usize,
        cr: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            random_tensor(Shape::new(cr, c, 1, 1), rng),
            random_tensor(Shape::new(1, cr, 1, 1), rng),
            random_tensor(Shape::new(c, cr, 1, 1), rng),
            random_tensor(Shape::new(1, c, 1, 1), rng),
        )
    }

    suite.run("se_block/input", |rng| {
        let shape = random_shape(rng);
        let cr = (shape.c / 2).max(1);
        let (wr, br, we, be) = se_weights(shape.c, cr, rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let a: Vec<Var> = [&wr, &br, &we, &be]
                    .into_iter()
                    .map(|t| g.constant(t.clone()))
                    .collect();
                let y = ops::se_block(g, v, a[0], a[1], a[2], a[3], 0.2)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("se_block/weights", |rng| {
        let shape = random_shape(rng);
        let cr = (shape.c / 2).max(1);
        let (wr, br, we, be) = se_weights(shape.c, cr, rng);
        let x = random_tensor(shape, rng);
        let wrt_reduce = grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let brv = g.constant(br.clone());
                let wev = g.constant(we.clone());
                let bev = g.constant(be.clone());
                let y = ops::se_block(g, xv, v, brv, wev, bev, 0.2)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &wr,
            EPS,
        )?;
        let wrt_expand = grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let wrv = g.constant(wr.clone());
                let brv = g.constant(br.clone());
                let bev = g.constant(be.clone());
                let y = ops::se_block(g, xv, wrv, brv, v, bev, 0.2)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &we,
            EPS,
        )?;
        Ok(wrt_reduce.max(wrt_expand))
    })?;

    suite.run("pixel_shuffle", |rng| {
        let r = 2;
        let x = random_tensor(
            Shape::new(
                rng.gen_range(1..=2),
                r * r * rng.gen_range(1..=4),
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
            ),
            rng,
        );
        grad_check(
            |g, v| {
                let y = ops::pixel_shuffle(g, v, r)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("pixel_unshuffle", |rng| {
        let r = 2;
        let x = random_tensor(
            Shape::new(
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                r * rng.gen_range(1..=3),
                r * rng.gen_range(1..=3),
            ),
            rng,
        );
        grad_check(
            |g, v| {
                let y = ops::pixel_unshuffle(g, v, r)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("mse_loss", |rng| {
        let shape = random_shape(rng);
        let target = random_tensor(shape, rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let t = g.constant(target.clone());
                ops::mse_loss(g, v, t)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("conv_leaky_mean_pipeline", |rng| {
        let shape = random_shape(rng);
        let co = rng.gen_range(1..=3);
        let w = random_tensor(Shape::new(co, shape.c, 3, 3), rng);
        let x = random_tensor(shape, rng);
        grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let y = ops::conv2d(g, v, wv, None, 1, 1)?;
                let y = ops::leaky_relu(g, y, 0.2)?;
                g.reduce_mean(y)
            },
            &x,
            EPS,
        )
    })?;

    suite.run("model", |rng| model_case(rng))?;

    Ok(suite.results)
}

/// Full desk-scale network + MSE, differentiated with respect to a stem
/// weight and the final conv weight via the parameter-override hook.
fn model_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model: Model<f64> = Model::build(ModelConfig::tiny(rng.gen()))?;
    let input = random_tensor(Shape::new(1, 1, 5, 5), rng);
    let target = random_tensor(Shape::new(1, 1, 80, 80), rng);

    let mut worst = 0.0f64;
    for name in ["stem.weight", "final.weight"] {
        let idx = model.param_index(name).expect("parameter exists");
        let x = model.params()[idx].value.clone();
        let err = grad_check(
            |g, v| {
                let pass = model.forward_with_overrides(g, &input, &[(idx, v)])?;
                let t = g.constant(target.clone());
                ops::mse_loss(g, pass.output, t)
            },
            &x,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
