//! Node bodies written against [`ThreadPort`], so each runs unchanged as a
//! software or hardware thread. Resource names default to the ones used in
//! the example configurations and can be overridden through parameters.

use super::workloads::{odd_even_transposition_sort, sobel, workload_inverse_kinematics, SORT_LEN};
use crate::hwthread::{Behavior, BufferRequest, Fault, RosCalls, ThreadContext, ThreadPort};

/// Default payload capacity of the copy node: the largest benchmark message.
pub const COPY_CAPACITY: u32 = 6 << 20;

fn le(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn put(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// Sequence header `(address, size, capacity)` at `addr`.
fn read_header(port: &mut dyn ThreadPort, addr: u32) -> Result<(u32, u32, u32), Fault> {
    let mut h = [0u8; 12];
    port.mem_read_into(addr, &mut h)?;
    Ok((le(&h, 0), le(&h, 4), le(&h, 8)))
}

fn read_payload(port: &mut dyn ThreadPort, addr: u32, len: u32, buf: &mut Vec<u8>) -> Result<(), Fault> {
    buf.resize(len as usize, 0);
    if len > 0 {
        port.mem_read_into(addr, buf)?;
    }
    Ok(())
}

fn names(ctx: &ThreadContext, keys: &[(&str, &str)]) -> Vec<String> {
    keys.iter().map(|(k, d)| ctx.resource_param(k, d).to_string()).collect()
}

/// Republishes every received message after copying it through local
/// memory. Handles any message type whose only sequence is a top-level byte
/// sequence `data`.
pub struct CopyNode;

impl CopyNode {
    const RES: [(&'static str, &'static str); 3] = [("Sub", "sub"), ("Pub", "pub"), ("Msg", "msg")];
}

impl Behavior for CopyNode {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn buffers(&self, ctx: &ThreadContext) -> Vec<BufferRequest> {
        let cap = ctx.param_u32("Capacity", COPY_CAPACITY).unwrap_or(COPY_CAPACITY);
        vec![BufferRequest::new(ctx.resource_param("Msg", "msg"), 0, &[("data", cap)])]
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [sub, publ, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let (sub, publ) = (ctx.handle(&sub)?, ctx.handle(&publ)?);
        let root_len = ctx.size_of(&msg, 0)? as usize;
        let hdr = ctx.offset_of(&msg, 0, "data")? as usize;
        let out = port.ros_message_address(ctx.handle(&msg)?, 0)?;
        let (out_data, _, cap) = read_header(port, out + hdr as u32)?;
        let mut root = vec![0u8; root_len];
        let mut local = Vec::new();
        loop {
            let m = port.ros_subscriber_take(sub)?;
            port.mem_read_into(m, &mut root)?;
            let (addr, size) = (le(&root, hdr), le(&root, hdr + 4));
            if size > cap {
                log::warn!("copy: dropping {size}-byte message, buffer holds {cap}");
                continue;
            }
            read_payload(port, addr, size, &mut local)?;
            if size > 0 {
                port.mem_write(out_data, &local)?;
            }
            put(&mut root, hdr, out_data);
            put(&mut root, hdr + 8, cap);
            port.mem_write(out, &root)?;
            port.ros_publisher_publish(publ, out)?;
        }
    }
}

/// Sorts 2048-element `data` sequences; other lengths are skipped.
pub struct SortNode;

impl SortNode {
    const RES: [(&'static str, &'static str); 3] = [("Sub", "sub"), ("Pub", "pub"), ("Msg", "msg")];
}

impl Behavior for SortNode {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn buffers(&self, ctx: &ThreadContext) -> Vec<BufferRequest> {
        vec![BufferRequest::new(ctx.resource_param("Msg", "msg"), 0, &[("data", SORT_LEN as u32)])]
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [sub, publ, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let (sub, publ) = (ctx.handle(&sub)?, ctx.handle(&publ)?);
        let hdr = ctx.offset_of(&msg, 0, "data")?;
        let out = port.ros_message_address(ctx.handle(&msg)?, 0)?;
        let (out_data, _, _) = read_header(port, out + hdr)?;
        let mut bytes = Vec::new();
        loop {
            let m = port.ros_subscriber_take(sub)?;
            let (addr, size, _) = read_header(port, m + hdr)?;
            if size as usize != SORT_LEN {
                log::warn!("sort: skipping message with {size} elements");
                continue;
            }
            read_payload(port, addr, size * 4, &mut bytes)?;
            let mut v: Vec<u32> = bytes.chunks_exact(4).map(|c| le(c, 0)).collect();
            odd_even_transposition_sort(&mut v);
            let sorted: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            port.mem_write(out_data, &sorted)?;
            port.write_u32(out + hdr + 4, size)?;
            port.ros_publisher_publish(publ, out)?;
        }
    }
}

/// Maps a packed Q8.6 angle pair (`data: u32`) to a servo PWM value.
/// Out-of-range inputs are skipped.
pub struct InverseKinematicsNode;

impl InverseKinematicsNode {
    const RES: [(&'static str, &'static str); 3] = [("Sub", "sub"), ("Pub", "pub"), ("Msg", "msg")];
}

impl Behavior for InverseKinematicsNode {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [sub, publ, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let (sub, publ) = (ctx.handle(&sub)?, ctx.handle(&publ)?);
        let off = ctx.offset_of(&msg, 0, "data")?;
        let out = port.ros_message_address(ctx.handle(&msg)?, 0)?;
        loop {
            let m = port.ros_subscriber_take(sub)?;
            let packed = port.read_u32(m + off)?;
            match workload_inverse_kinematics(packed) {
                Ok(pwm) => {
                    port.write_u32(out + off, pwm)?;
                    port.ros_publisher_publish(publ, out)?;
                }
                Err(e) => log::warn!("inverse kinematics: skipping input {packed:#010x}: {e}"),
            }
        }
    }
}

/// Image field offsets within one message part, relative to its root.
struct ImageOffsets {
    height: u32,
    width: u32,
    step: u32,
    data: u32,
}

impl ImageOffsets {
    fn new(ctx: &ThreadContext, res: &str, part: u32, prefix: &str) -> Result<Self, Fault> {
        let o = |f: &str| ctx.offset_of(res, part, &format!("{prefix}{f}"));
        Ok(ImageOffsets { height: o("height")?, width: o("width")?, step: o("step")?, data: o("data")? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ImageHeader {
    height: u32,
    width: u32,
    step: u32,
    addr: u32,
    size: u32,
    capacity: u32,
}

fn read_image(port: &mut dyn ThreadPort, base: u32, o: &ImageOffsets) -> Result<ImageHeader, Fault> {
    let (addr, size, capacity) = read_header(port, base + o.data)?;
    Ok(ImageHeader {
        height: port.read_u32(base + o.height)?,
        width: port.read_u32(base + o.width)?,
        step: port.read_u32(base + o.step)?,
        addr,
        size,
        capacity,
    })
}

/// Writes scalars and size of an image whose payload is already in place.
fn write_image_fields(
    port: &mut dyn ThreadPort,
    base: u32,
    o: &ImageOffsets,
    h: u32,
    w: u32,
    step: u32,
    size: u32,
) -> Result<(), Fault> {
    port.write_u32(base + o.height, h)?;
    port.write_u32(base + o.width, w)?;
    port.write_u32(base + o.step, step)?;
    port.write_u32(base + o.data + 4, size)
}

fn image_dims(ctx: &ThreadContext) -> Result<(u32, u32), Fault> {
    Ok((
        ctx.param_u32("Width", super::workloads::SOBEL_WIDTH)?,
        ctx.param_u32("Height", super::workloads::SOBEL_HEIGHT)?,
    ))
}

/// Sobel filter service. Requests whose image is not `Width`×`Height` RGB
/// are answered with an empty image.
pub struct SobelServer;

impl SobelServer {
    const RES: [(&'static str, &'static str); 2] = [("Server", "filter_server"), ("Msg", "filter_service_msg")];
}

impl Behavior for SobelServer {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn buffers(&self, ctx: &ThreadContext) -> Vec<BufferRequest> {
        let (w, h) = image_dims(ctx).unwrap_or((0, 0));
        vec![BufferRequest::new(ctx.resource_param("Msg", "filter_service_msg"), 1, &[("img.data", w * h * 3)])]
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [srv, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let srv = ctx.handle(&srv)?;
        let (w, h) = image_dims(ctx)?;
        let req_o = ImageOffsets::new(ctx, &msg, 0, "img.")?;
        let resp_o = ImageOffsets::new(ctx, &msg, 1, "img.")?;
        let resp = port.ros_message_address(ctx.handle(&msg)?, 1)?;
        let (resp_data, _, _) = read_header(port, resp + resp_o.data)?;
        let mut ram = Vec::new();
        loop {
            let req = port.ros_serviceserver_take(srv)?;
            let img = read_image(port, req, &req_o)?;
            if (img.width, img.height, img.step, img.size) == (w, h, w * 3, w * h * 3) && img.size > 0 {
                read_payload(port, img.addr, img.size, &mut ram)?;
                let filtered = sobel(w, h, 3, &ram);
                port.mem_write(resp_data, &filtered)?;
                write_image_fields(port, resp, &resp_o, h, w, w * 3, img.size)?;
            } else {
                log::warn!(
                    "sobel: rejecting {}x{} image (step {}, {} bytes)",
                    img.width,
                    img.height,
                    img.step,
                    img.size
                );
                write_image_fields(port, resp, &resp_o, 0, 0, 0, 0)?;
            }
            port.ros_serviceserver_send_response(srv, resp)?;
        }
    }
}

/// Image pipeline node: forwards each received image through the filter
/// service and publishes the filtered result.
pub struct DipNode;

impl DipNode {
    const RES: [(&'static str, &'static str); 5] = [
        ("Sub", "sub"),
        ("Pub", "pub"),
        ("Client", "filter_client"),
        ("ImageMsg", "image_msg"),
        ("ServiceMsg", "filter_service_msg"),
    ];
}

impl Behavior for DipNode {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn buffers(&self, ctx: &ThreadContext) -> Vec<BufferRequest> {
        let (w, h) = image_dims(ctx).unwrap_or((0, 0));
        vec![
            BufferRequest::new(ctx.resource_param("ImageMsg", "image_msg"), 0, &[("data", w * h * 3)]),
            BufferRequest::new(ctx.resource_param("ServiceMsg", "filter_service_msg"), 0, &[("img.data", w * h * 3)]),
        ]
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [sub, publ, client, image_msg, service_msg] = names(ctx, &Self::RES).try_into().unwrap();
        let (sub, publ, client) = (ctx.handle(&sub)?, ctx.handle(&publ)?, ctx.handle(&client)?);
        let img_o = ImageOffsets::new(ctx, &image_msg, 0, "")?;
        let req_o = ImageOffsets::new(ctx, &service_msg, 0, "img.")?;
        let resp_o = ImageOffsets::new(ctx, &service_msg, 1, "img.")?;
        let out = port.ros_message_address(ctx.handle(&image_msg)?, 0)?;
        let req = port.ros_message_address(ctx.handle(&service_msg)?, 0)?;
        let (out_data, _, out_cap) = read_header(port, out + img_o.data)?;
        let (req_data, _, req_cap) = read_header(port, req + req_o.data)?;
        let mut ram = Vec::new();
        loop {
            let m = port.ros_subscriber_take(sub)?;
            let img = read_image(port, m, &img_o)?;
            if img.size > req_cap {
                log::warn!("dip: dropping {}-byte image", img.size);
                continue;
            }
            read_payload(port, img.addr, img.size, &mut ram)?;
            if img.size > 0 {
                port.mem_write(req_data, &ram)?;
            }
            write_image_fields(port, req, &req_o, img.height, img.width, img.step, img.size)?;
            port.ros_serviceclient_send_request(client, req)?;

            let resp = port.ros_serviceclient_take(client)?;
            let filtered = read_image(port, resp, &resp_o)?;
            if filtered.size > out_cap {
                log::warn!("dip: dropping {}-byte filtered image", filtered.size);
                continue;
            }
            read_payload(port, filtered.addr, filtered.size, &mut ram)?;
            if filtered.size > 0 {
                port.mem_write(out_data, &ram)?;
            }
            write_image_fields(port, out, &img_o, filtered.height, filtered.width, filtered.step, filtered.size)?;
            port.ros_publisher_publish(publ, out)?;
        }
    }
}

/// Publishes `Value` into field `data` `Count` times, then finishes.
pub struct ConstantNode;

impl ConstantNode {
    const RES: [(&'static str, &'static str); 2] = [("Pub", "pub"), ("Msg", "msg")];
}

impl Behavior for ConstantNode {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [publ, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let publ = ctx.handle(&publ)?;
        let off = ctx.offset_of(&msg, 0, "data")?;
        let value = ctx.param_u32("Value", 0)?;
        let out = port.ros_message_address(ctx.handle(&msg)?, 0)?;
        for _ in 0..ctx.param_u32("Count", 1)? {
            port.write_u32(out + off, value)?;
            port.ros_publisher_publish(publ, out)?;
        }
        Ok(())
    }
}

/// Action server counting from 1 to the goal's `target`, one feedback per
/// step, with the sum as result.
pub struct CountServer;

impl CountServer {
    const RES: [(&'static str, &'static str); 2] = [("Server", "server"), ("Msg", "msg")];
}

impl Behavior for CountServer {
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        names(ctx, &Self::RES)
    }

    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault> {
        let [srv, msg] = names(ctx, &Self::RES).try_into().unwrap();
        let srv = ctx.handle(&srv)?;
        let msg_h = ctx.handle(&msg)?;
        let target_off = ctx.offset_of(&msg, 0, "target")?;
        let value_off = ctx.offset_of(&msg, 1, "value")?;
        let total_off = ctx.offset_of(&msg, 2, "total")?;
        let feedback = port.ros_message_address(msg_h, 1)?;
        let result = port.ros_message_address(msg_h, 2)?;
        loop {
            let (goal, addr) = port.ros_actionserver_take_goal(srv)?;
            let target = port.read_u32(addr + target_off)?;
            let mut total = 0u32;
            for i in 1..=target {
                total = total.wrapping_add(i);
                port.write_u32(feedback + value_off, i)?;
                port.ros_actionserver_publish_feedback(srv, goal, feedback)?;
            }
            port.write_u32(result + total_off, total)?;
            port.ros_actionserver_send_result(srv, goal, result)?;
        }
    }
}

/// Behaviors selectable by name from a configuration file.
pub fn behavior_by_name(name: &str) -> Option<Box<dyn Behavior>> {
    Some(match name {
        "copy" => Box::new(CopyNode),
        "sort" => Box::new(SortNode),
        "inverse_kinematics" => Box::new(InverseKinematicsNode),
        "sobel_server" => Box::new(SobelServer),
        "dip" => Box::new(DipNode),
        "constant" => Box::new(ConstantNode),
        "count_server" => Box::new(CountServer),
        _ => return None,
    })
}

pub const BEHAVIOR_NAMES: [&str; 7] =
    ["copy", "sort", "inverse_kinematics", "sobel_server", "dip", "constant", "count_server"];
