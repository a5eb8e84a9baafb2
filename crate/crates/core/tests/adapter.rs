//! Adapter client against the loopback binary.

use std::time::Duration;

use stabletta::providers::adapter::{AdapterClient, AdapterError};
use stabletta::tensor::{ImageTensor, TensorState};

const LOOPBACK: &str = env!("CARGO_BIN_EXE_stabletta-loopback");

fn loopback(args: &str) -> AdapterClient {
    AdapterClient::spawn(&format!("{LOOPBACK} {args}"), Duration::from_secs(20)).unwrap()
}

fn image(c: usize, h: usize, w: usize, seed: usize) -> ImageTensor {
    let data = (0..c * h * w)
        .map(|i| (((i * 7919 + seed * 104729) % 1000) as f64 / 250.0) - 2.0)
        .collect();
    ImageTensor::new(c, h, w, TensorState::Standardized, data).unwrap()
}

fn channel_means(img: &ImageTensor) -> Vec<f64> {
    (0..img.channels())
        .map(|c| {
            let plane = img.channel(c);
            plane.iter().map(|&v| f64::from(v as f32)).sum::<f64>() / plane.len() as f64
        })
        .collect()
}

#[test]
fn returns_channel_means() {
    let mut client = loopback("--classes 5 --height 4 --width 6");
    let hello = client.hello();
    assert_eq!((hello.num_classes, hello.channels, hello.height, hello.width), (5, 3, 4, 6));
    let batch: Vec<_> = (0..3).map(|s| image(3, 4, 6, s)).collect();
    let out = client.infer(&batch).unwrap();
    assert_eq!(out.len(), 3);
    for (img, z) in batch.iter().zip(&out) {
        let means = channel_means(img);
        for (k, &v) in z.values().iter().enumerate() {
            assert_eq!(v, f64::from(means[k % 3] as f32));
        }
    }
    client.shutdown().unwrap();
}

#[test]
fn thousand_classes_sixteen_images() {
    let mut client = loopback("--classes 1000 --height 8 --width 8");
    assert_eq!(client.num_classes(), 1000);
    let batch: Vec<_> = (0..16).map(|s| image(3, 8, 8, s)).collect();
    let out = client.infer(&batch).unwrap();
    assert_eq!(out.len(), 16);
    assert!(out.iter().all(|z| z.len() == 1000));
}

#[test]
fn killed_adapter_reports_batch_index() {
    let mut client = loopback("--die-after 2");
    let batch: Vec<_> = (0..2).map(|s| image(3, 8, 8, s)).collect();
    client.infer(&batch).unwrap();
    client.infer(&batch).unwrap();
    let err = client.infer(&batch).unwrap_err();
    match &err {
        AdapterError::ProcessExit { batch, status } => {
            assert_eq!(*batch, Some(2));
            assert_eq!(status.and_then(|s| s.code()), Some(3));
        }
        other => panic!("expected a process exit, got {other:?}"),
    }
    assert!(err.to_string().contains("batch 2"), "{err}");
    assert!(matches!(client.infer(&batch), Err(AdapterError::Poisoned)));
}

#[test]
fn malformed_response_is_protocol_error() {
    let mut client = loopback("--garbage-after 1");
    let batch = vec![image(3, 8, 8, 0)];
    client.infer(&batch).unwrap();
    let err = client.infer(&batch).unwrap_err();
    assert!(matches!(err, AdapterError::Protocol { batch: Some(1), .. }), "{err:?}");
}

#[test]
fn shape_and_state_are_checked_before_sending() {
    let mut client = loopback("");
    let err = client.infer(&[image(3, 4, 4, 0)]).unwrap_err();
    assert!(matches!(err, AdapterError::ShapeMismatch { .. }));
    let unit = ImageTensor::filled(3, 8, 8, 0.5).unwrap();
    assert!(matches!(client.infer(&[unit]), Err(AdapterError::NotStandardized)));
    assert_eq!(client.batches_sent(), 0);
}

#[test]
fn silent_adapter_times_out() {
    let err = AdapterClient::spawn("sleep 5", Duration::from_millis(200)).err().unwrap();
    assert!(matches!(err, AdapterError::Timeout { batch: None, .. }), "{err:?}");
}

#[test]
fn missing_command_exits_before_handshake() {
    let err = AdapterClient::spawn("/nonexistent/adapter --serve", Duration::from_secs(5))
        .err()
        .unwrap();
    assert!(matches!(err, AdapterError::ProcessExit { batch: None, .. }), "{err:?}");
}

#[test]
fn wrong_first_message_is_rejected() {
    // a SHUTDOWN frame where HELLO is expected
    let err = AdapterClient::spawn("printf '\\000\\000\\000\\000\\377'; sleep 1", Duration::from_secs(5))
        .err()
        .unwrap();
    assert!(matches!(err, AdapterError::Protocol { batch: None, .. }), "{err:?}");
}
