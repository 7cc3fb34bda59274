use cascade_zeno::cli;

fn main() {
    std::process::exit(cli::run());
}
