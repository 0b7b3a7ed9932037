mod http_session {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/http_session.rs"));
}
#[test]
fn http_session_runs() {
    http_session::run_example().expect("http_session example failed");
}

mod cli_tour {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/cli_tour.rs"));
}
#[test]
fn cli_tour_runs() {
    cli_tour::run_example().expect("cli_tour example failed");
}
