//! Encode a mask to run-length form, decode it back, and see the codec
//! reject malformed strings.
//!
//! cargo run --example rle_codec

use segkit::data::{decode_rle, encode_rle, rle_area, Bitmap};

fn main() {
    // a 6×8 mask with a filled 3×4 block
    let mut mask = Bitmap::zeros(6, 8);
    for y in 1..4 {
        for x in 2..6 {
            mask.set(y, x, 1);
        }
    }
    let rle = encode_rle(&mask);
    println!("mask with {} pixels set", mask.count_ones());
    println!("rle: {rle:?}");
    println!("area from run lengths: {}", rle_area(&rle, 48).unwrap());

    let back = decode_rle(&rle, 6, 8).unwrap();
    assert_eq!(back, mask);
    for y in 0..6 {
        let row: String = (0..8).map(|x| if back.get(y, x) == 1 { '#' } else { '.' }).collect();
        println!("  {row}");
    }

    for bad in ["1 3 5", "0 2", "1 3 2 2", "40 20", "a b"] {
        match decode_rle(bad, 6, 8) {
            Ok(_) => println!("{bad:>10} -> accepted?!"),
            Err(e) => println!("{bad:>10} -> {e}"),
        }
    }
}
