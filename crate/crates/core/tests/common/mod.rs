#![allow(dead_code)]

use std::time::{Duration, Instant};

use hwnode::config::{ProjectConfig, System, SystemOptions};
use hwnode::middleware::{Graph, MwError, NodeKind};
use hwnode::msg::{MessageInstance, MsgKind, TypeHandle};

pub const POLL: Duration = Duration::from_millis(10);
pub const LONG: Option<Duration> = Some(Duration::from_secs(30));

pub type Input = Box<dyn Fn(&Graph) -> MessageInstance>;

/// A thread with one subscriber, one publisher and one message object, in
/// its own resource group.
pub fn topic_node_cfg(behavior: &str, package: &str, ty: &str, input: &str, output: &str, depth: usize) -> String {
    format!(
        r#"
[General]
Slots = 2

[ResourceGroup@G]
node = rosnode, "{behavior}_node"
msg = rosmsg, {package}, msg, {ty}
sub = rossub, node, msg, "{input}", 10000
pub = rospub, node, msg, "{output}"

[SwThread@worker]
ResourceGroup = G
Slot = 0
Behavior = {behavior}
QueueDepth = {depth}
"#
    )
}

pub fn sobel_server_cfg(width: u32, height: u32) -> String {
    format!(
        r#"
[General]
Slots = 1

[ResourceGroup@ResourceGroupSobel]
node_3 = rosnode, "Sobel"
filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
filter_server = rossrvs, node_3, filter_service_msg, "sobelservice", 10000

[SwThread@worker]
ResourceGroup = ResourceGroupSobel
Slot = 0
Behavior = sobel_server
Width = {width}
Height = {height}
"#
    )
}

pub fn start(cfg_text: &str, hw: bool, opts: &SystemOptions) -> System {
    let mut cfg = ProjectConfig::parse(cfg_text).expect("config parses");
    let names: Vec<String> = cfg.threads.iter().map(|t| t.name.clone()).collect();
    for n in names {
        cfg.set_mapping(&n, hw).unwrap();
    }
    System::start(&cfg, opts).expect("system starts")
}

pub fn ty(g: &Graph, package: &str, kind: MsgKind, name: &str) -> TypeHandle {
    g.registry().lookup_parts(package, kind, name).unwrap_or_else(|| panic!("type {package}/{name}"))
}

pub fn payload_msg(g: &Graph, seq: u32, data: &[u8]) -> MessageInstance {
    let reg = g.registry();
    let m = reg.alloc_with(g.arena(), ty(g, "bench", MsgKind::Msg, "Payload"), &[("data", data.len() as u32)]).unwrap();
    reg.write_word(&m, "seq", seq).unwrap();
    reg.write_sequence(&m, "data", data).unwrap();
    m
}

pub fn sort_msg(g: &Graph, data: &[u32]) -> MessageInstance {
    let reg = g.registry();
    let m = reg
        .alloc_with(g.arena(), ty(g, "application_msgs", MsgKind::Msg, "SortData"), &[("data", data.len() as u32)])
        .unwrap();
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    reg.write_sequence(&m, "data", &bytes).unwrap();
    m
}

pub fn u32_msg(g: &Graph, v: u32) -> MessageInstance {
    let reg = g.registry();
    let m = reg.alloc_with(g.arena(), ty(g, "std_msgs", MsgKind::Msg, "UInt32"), &[]).unwrap();
    reg.write_word(&m, "data", v).unwrap();
    m
}

pub fn image_request(g: &Graph, w: u32, h: u32, data: &[u8]) -> MessageInstance {
    let reg = g.registry();
    let t = ty(g, "application_msgs", MsgKind::SrvRequest, "SobelSrv");
    let m = reg.alloc_with(g.arena(), t, &[("img.data", data.len() as u32)]).unwrap();
    reg.write_word(&m, "img.height", h).unwrap();
    reg.write_word(&m, "img.width", w).unwrap();
    reg.write_word(&m, "img.step", w * 3).unwrap();
    reg.write_sequence(&m, "img.data", data).unwrap();
    m
}

/// Publishes `inputs` on `input` and collects `expected` messages from
/// `output`, serialized. Fails if more than `expected` arrive.
pub fn drive_topic(sys: &System, input: &str, output: &str, inputs: &[Input], expected: usize) -> Vec<Vec<u8>> {
    let g = sys.graph();
    let node = g.create_node("driver", NodeKind::Software).unwrap();
    let first = inputs.first().map(|f| f(g).ty());
    let out_ty = first.expect("at least one input");
    let sub = node.create_subscriber(output, out_ty, expected + 16, POLL).unwrap();
    let publ = node.create_publisher(input, out_ty).unwrap();
    for f in inputs {
        publ.publish(&f(g)).unwrap();
    }
    let mut out = Vec::new();
    for _ in 0..expected {
        let m = sub.take(LONG).expect("output arrives");
        out.push(g.registry().serialize(&m).unwrap());
    }
    assert_eq!(sub.take(Some(Duration::from_millis(50))).unwrap_err(), MwError::Timeout, "unexpected extra output");
    out
}

/// Polls `f` until it returns true or `timeout` passes.
pub fn eventually(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    f()
}

/// Brute-force Sobel reference: per channel |Gx| + |Gy| clamped to 255,
/// zero border.
pub fn sobel_oracle(w: usize, h: usize, img: &[u8]) -> Vec<u8> {
    const KX: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    const KY: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    let mut out = vec![0u8; w * h * 3];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let (mut gx, mut gy) = (0i32, 0i32);
                for (j, (rx, ry)) in KX.iter().zip(KY.iter()).enumerate() {
                    for i in 0..3 {
                        let p = img[((y + j - 1) * w + (x + i - 1)) * 3 + c] as i32;
                        gx += rx[i] * p;
                        gy += ry[i] * p;
                    }
                }
                out[(y * w + x) * 3 + c] = (gx.abs() + gy.abs()).min(255) as u8;
            }
        }
    }
    out
}

/// A free loopback port (best effort: the port is released before use).
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}
