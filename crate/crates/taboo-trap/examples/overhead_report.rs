//! Prints the inference-cost accounting: multiply-accumulates and parameter
//! counts for LeNet5 with and without the violation detector installed. The
//! detector is a value comparison against stored thresholds, so the two
//! columns are identical.

use taboo_trap::model::build_lenet5;

fn main() {
    let model = build_lenet5(0);
    let plain = model.count_overhead(false);
    let defended = model.count_overhead(true);
    println!("LeNet5 ({} parameters)", model.param_count());
    println!("{:<22} {:>12} {:>12}", "", "MACs", "params");
    println!("{:<22} {:>12} {:>12}", "without detector", plain.macs, plain.params);
    println!("{:<22} {:>12} {:>12}", "with detector", defended.macs, defended.params);
    println!(
        "{:<22} {:>12} {:>12}",
        "added",
        defended.macs - plain.macs,
        defended.params - plain.params
    );
}
