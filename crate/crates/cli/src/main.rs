fn main() {
    println!("meftlab");
}
