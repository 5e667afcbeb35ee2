//! Evaluates each domain-generalization penalty on two toy environments,
//! once identical and once shifted.

use oodprobe::algorithms::{andmask_aggregate, coral_penalty, groupdro_reweight, irm_penalty, mmd_penalty, per_env_risks, vrex_penalty};
use oodprobe::nn::Tensor;

fn main() -> oodprobe::Result<()> {
    let a = Tensor::new(vec![4, 2], vec![1.0, -0.5, 0.2, 0.8, -1.0, 0.3, 0.5, 0.5])?;
    let shifted = Tensor::new(vec![4, 2], a.data().iter().map(|v| 2.0 * v + 0.7).collect())?;
    let y: &[usize] = &[0, 1, 0, 1];
    for (name, b) in [("identical", &a), ("shifted", &shifted)] {
        let (risks, _) = per_env_risks(&[&a, b], &[y, y])?;
        println!("{name}:");
        println!("  IRM   {:.6}", irm_penalty(&[&a, b], &[y, y])?.0);
        println!("  VREx  {:.6}", vrex_penalty(&risks)?.0);
        println!("  CORAL {:.6}", coral_penalty(&[&a, b])?.0);
        println!("  MMD   {:.6}", mmd_penalty(&[&a, b], 0.5)?.0);
        let (q, loss) = groupdro_reweight(&[0.5, 0.5], &risks, 0.5)?;
        println!("  GroupDRO weights {q:.3?} loss {loss:.4}");
    }
    let grads: [&[f64]; 2] = [&[0.5, -0.2, 0.1], &[0.3, 0.4, 0.2]];
    println!("ANDMask (tau 1.0): {:?}", andmask_aggregate(&grads, 1.0)?);
    Ok(())
}
