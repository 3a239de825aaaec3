fn main() { println!("u07"); }
