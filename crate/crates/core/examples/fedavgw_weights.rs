//! Sample-count weights next to inverse-size weights for a skewed client set.
//!
//! ```bash
//! cargo run -p fedskew --example fedavgw_weights
//! ```

use fedskew::federation::{fedavg_weights, fedavgw_weights};

fn main() -> fedskew::Result<()> {
    let pair = fedavg_weights(&[118, 34742])?.standard;
    println!("n = [118, 34742]: fedavg weight ratio {:.1}\n", pair[1] / pair[0]);

    let sizes = [118, 640, 2210, 5030, 34742];
    print!("{:<12}", "n_k");
    sizes.iter().for_each(|n| print!("{n:>9}"));
    println!();
    let fedavg = fedavg_weights(&sizes)?;
    print!("{:<12}", "fedavg");
    fedavg.standard.iter().for_each(|w| print!("{w:>9.4}"));
    println!();
    for beta in [0.0, 0.1, 0.5, 1.0] {
        let w = fedavgw_weights(&sizes, beta)?;
        print!("{:<12}", format!("beta {beta}"));
        w.lora.iter().for_each(|x| print!("{x:>9.4}"));
        println!();
        assert_eq!(w.standard, fedavg.standard, "non-adapter groups keep sample-count weights");
    }
    Ok(())
}
