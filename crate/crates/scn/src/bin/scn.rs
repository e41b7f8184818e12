fn main() {
    println!("scn placeholder");
}
