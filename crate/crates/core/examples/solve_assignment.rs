//! Constrained versus unconstrained assignment on a small cost matrix.

use pcpl::solver::{brute_force_assignment, nearest_centroid_assignment, solve_assignment, CostMatrix};
use pcpl::CountVector;

fn main() -> pcpl::Result<()> {
    // rows are classes, columns samples
    let costs = CostMatrix::new(vec![vec![1.0, 2.0, 3.0, 0.0], vec![3.0, 2.0, 1.0, 4.0]])?;
    let counts = CountVector(vec![2, 2]);

    let exact = solve_assignment(&costs, &counts)?;
    println!("constrained: labels {:?}, cost {}", exact.class_of, exact.total_cost);

    let check = brute_force_assignment(&costs, &counts)?;
    println!("enumeration: cost {}", check.total_cost);

    let free = nearest_centroid_assignment(&costs);
    println!(
        "unconstrained: labels {:?}, counts {:?}, cost {}",
        free.class_of, free.counts.0, free.total_cost
    );
    Ok(())
}
