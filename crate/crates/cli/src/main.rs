fn main() {
    std::process::exit(vk_homog::run(std::env::args_os()));
}
