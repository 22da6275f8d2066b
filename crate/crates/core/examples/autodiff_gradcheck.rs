//! Builds a small conv net on a tape and checks every parameter gradient
//! against central finite differences.

use occ4d::diffcore::gradcheck::{central_difference, max_relative_error, FD_STEP};
use occ4d::diffcore::{ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> occ4d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_tensor = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut params = ParamSet::new();
    params.insert("conv1.w", rand_tensor(vec![4, 2, 3, 3])?)?;
    params.insert("conv1.b", rand_tensor(vec![4])?)?;
    params.insert("conv2.w", rand_tensor(vec![1, 4, 3, 3])?)?;
    params.insert("conv2.b", rand_tensor(vec![1])?)?;
    let input = rand_tensor(vec![2, 8, 8])?;
    let target = rand_tensor(vec![1, 4, 4])?;

    let forward = |ps: &ParamSet, tape: &mut Tape| -> occ4d::Result<_> {
        let p = ps.bind(tape);
        let x = tape.leaf(input.clone());
        let h = tape.conv2d(x, p.get("conv1.w"), p.get("conv1.b"), 1)?;
        let h = tape.leaky_relu(h, 0.1);
        let h = tape.max_pool2x(h)?;
        let y = tape.conv2d(h, p.get("conv2.w"), p.get("conv2.b"), 1)?;
        let y = tape.sigmoid(y);
        Ok((tape.l1_loss(y, target.data())?, p))
    };

    let mut tape = Tape::new();
    let (loss, bound) = forward(&params, &mut tape)?;
    println!("loss = {:.6}", tape.value(loss)[0]);
    tape.backward(loss)?;
    let mut grads = params.clone();
    grads.accumulate_grads(&tape, &bound)?;

    for (name, t) in grads.iter() {
        let numeric = central_difference(
            |x| {
                let mut ps = params.clone();
                ps.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                let mut tape = Tape::without_grad();
                let (l, _) = forward(&ps, &mut tape).unwrap();
                tape.value(l)[0]
            },
            params.get(name).unwrap().data(),
            FD_STEP,
        );
        println!("{name:8} max rel. error {:.2e}", max_relative_error(t.grad().unwrap(), &numeric));
    }
    Ok(())
}
