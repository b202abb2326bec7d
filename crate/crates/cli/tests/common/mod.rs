#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use texid::synth::{generate_texture, perturb, PerturbSpec, TextureSpec};
use tower::ServiceExt;

pub const BOUNDARY: &str = "texid-test-boundary-7c1f";

pub enum Part<'a> {
    File(&'a str, &'a [u8]),
    Text(&'a str, &'a str),
}

pub fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n"
                    )
                    .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
            Part::Text(name, value) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}").as_bytes(),
                );
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub async fn post(app: &Router, uri: &str, parts: &[Part<'_>]) -> (StatusCode, String) {
    let req = Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(parts)))
        .unwrap();
    send(app, req).await
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, String) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub fn texture_png(seed: u64) -> Vec<u8> {
    generate_texture(&TextureSpec::with_seed(seed))
        .unwrap()
        .encode_png()
        .unwrap()
}

pub fn perturbed_png(seed: u64, p: &PerturbSpec) -> Vec<u8> {
    let img = generate_texture(&TextureSpec::with_seed(seed)).unwrap();
    perturb(&img, p).unwrap().0.encode_png().unwrap()
}

pub fn texid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texid")).args(args).output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap().trim_end().to_string()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap().trim_end().to_string()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
