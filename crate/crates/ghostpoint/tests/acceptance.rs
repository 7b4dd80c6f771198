//! End-to-end acceptance checks. Placeholder while the library is built out.

fn main() {
    println!("acceptance: no checks registered yet");
}
