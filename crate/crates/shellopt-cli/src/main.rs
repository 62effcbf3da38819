fn main() {
    println!("shellopt");
}
