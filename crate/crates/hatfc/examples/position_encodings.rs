//! Relative position encodings: offset-indexed table, constant-time
//! lookup, and the sin/cos identity.
//!
//! Run with: cargo run --example position_encodings

use hatfc::encoding::{direct_eval, RelPosTable};
use hatfc::Result;

fn main() -> Result<()> {
    let d = 8;
    let table = RelPosTable::<f64>::build(32, d)?;
    println!("table: offsets 0..=32 at dimension {d} ({} values)", table.flat().len());

    println!("\noffset 0 row (always [0, 1, 0, 1, ...]): {:?}", table.row(0)?);
    println!("offset 1 row: {:.5?}", table.row(1)?);

    // lookup(t, t') depends only on the offset t - t'
    let a = table.lookup(40, 35)?;
    let b = table.lookup(12, 7)?;
    println!("\nlookup(40, 35) == lookup(12, 7): {}", a == b);

    // and matches evaluating the sinusoids directly, bit for bit
    let direct = direct_eval::<f64>(5, d)?;
    println!(
        "lookup(40, 35) bit-identical to direct evaluation at offset 5: {}",
        a.iter().zip(&direct).all(|(x, y)| x.to_bits() == y.to_bits())
    );

    // each (sin, cos) pair sits on the unit circle
    let worst = (0..=32)
        .flat_map(|delta| {
            let row = table.row(delta).unwrap();
            (0..d / 2)
                .map(|i| (row[2 * i].powi(2) + row[2 * i + 1].powi(2) - 1.0).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0f64, f64::max);
    println!("max |sin² + cos² - 1| over the table: {worst:.2e}");

    // anti-causal lookups are refused
    println!("\nlookup(3, 9): {:?}", table.lookup(3, 9).unwrap_err());
    Ok(())
}
