fn main() {
    println!("vio");
}
