fn main() {
    println!("dps");
}
