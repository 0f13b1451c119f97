fn main() {
    std::process::exit(fedskew::fedcli::main(std::env::args_os()));
}
