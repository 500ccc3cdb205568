fn main() {
    std::process::exit(numprobe::harness::dispatch(std::env::args_os()));
}
