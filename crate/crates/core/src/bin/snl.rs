fn main() {
    println!("snl");
}
