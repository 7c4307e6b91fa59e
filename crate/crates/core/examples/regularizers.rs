//! The three activation penalties on a hand-made probability matrix.

use condnet::regularizers::{l_b, l_e, l_v, PenaltyNorm};
use condnet::Matrix;

fn main() -> condnet::Result<()> {
    let tau = 0.25;
    let cases = [
        ("on target, input-independent", vec![vec![0.25; 4]; 4]),
        (
            "on target, input-dependent",
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        ),
        ("everything on", vec![vec![1.0; 4]; 4]),
    ];
    println!("{:<30} {:>6} {:>6} {:>6}", "sigma", "L_b", "L_e", "L_v");
    for (name, rows) in cases {
        let s = Matrix::from_rows(&rows)?;
        println!(
            "{name:<30} {:>6.3} {:>6.3} {:>6.3}",
            l_b(&s, tau, PenaltyNorm::Abs).value,
            l_e(&s, tau, PenaltyNorm::Abs).value,
            l_v(&s)?.value
        );
    }
    Ok(())
}
