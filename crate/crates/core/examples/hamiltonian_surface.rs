//! Tabulate the penalized Hamiltonian, its maximizer and the induced
//! feedback rate.
//!
//! ```bash
//! cargo run --release -p stopctrl --example hamiltonian_surface
//! ```

use stopctrl::hamiltonian::{feedback_drift, hamiltonian_eval, HamiltonianQuery};

fn main() {
    let eps = 0.1;
    let a = 1.0;
    println!("penalty eps = {eps}, cost level a = {a}");
    println!(
        "{:>8} {:>12} {:>12} {:>12}",
        "y", "H(y)", "argmax p*", "eps y^2/4"
    );
    for k in 0..=16 {
        let y = -4.0 + 0.5 * k as f64;
        let hv = hamiltonian_eval(HamiltonianQuery { y, a, eps }).unwrap();
        println!(
            "{y:8.2} {:12.6} {:12.6} {:12.6}",
            hv.value,
            hv.maximizer,
            eps * y * y / 4.0
        );
    }

    println!("\nfeedback rate -2 psi'(d^2 - a^2) d as the field slope d varies:");
    println!("{:>8} {:>12}", "slope", "rate");
    for k in 0..=12 {
        let d = 0.25 * k as f64;
        println!("{d:8.2} {:12.4}", feedback_drift(d, a, eps));
    }
}
