#include "qkdnet/kms_protocol.hpp"

namespace qkdnet::kms {

namespace {

constexpr std::size_t kMaxIds = 4096;

void put_opt(Writer& w, const std::optional<std::string>& s) {
  w.u8(s ? 1 : 0);
  if (s) w.str(*s);
}

std::optional<std::string> get_opt(Reader& r) {
  auto flag = r.u8();
  if (flag > 1) throw DecodeError("bad option flag");
  if (!flag) return std::nullopt;
  return r.str(256);
}

void put_key(Writer& w, const DeliveredKey& k) {
  encode(w, k.key_id);
  encode(w, k.key);
  w.str(k.supplier_id);
  encode(w, k.label);
}

DeliveredKey get_key_body(Reader& r) {
  DeliveredKey k;
  k.key_id = decode<KeyId>(r);
  k.key = decode<KeyMaterial>(r);
  k.supplier_id = r.str(256);
  k.label = decode<seclevel::SecurityExpr>(r);
  return k;
}

void put_keys(Writer& w, const std::vector<DeliveredKey>& keys) {
  w.u32(static_cast<std::uint32_t>(keys.size()));
  for (const auto& k : keys) put_key(w, k);
}

std::vector<DeliveredKey> get_keys(Reader& r) {
  auto n = r.u32();
  if (n > kMaxIds) throw DecodeError("too many keys");
  std::vector<DeliveredKey> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(get_key_body(r));
  return out;
}

Bytes error_response(Errc code, const std::string& what, std::optional<std::int64_t> retry) {
  Writer w;
  w.u8(static_cast<std::uint8_t>(code));
  w.str(what);
  w.u8(retry ? 1 : 0);
  if (retry) w.i64(*retry);
  return std::move(w).take();
}

}  // namespace

Bytes KmsService::handle(ByteView request) {
  try {
    Reader r(request);
    return dispatch(r);
  } catch (const KmsError& e) {
    return error_response(e.code(), e.what(), e.retry_after_ms());
  } catch (const std::exception& e) {
    return error_response(Errc::invalid_request, e.what(), std::nullopt);
  }
}

Bytes KmsService::dispatch(Reader& r) {
  const auto verb = static_cast<Verb>(r.u8());
  Writer out;
  out.u8(0);
  switch (verb) {
    case Verb::open_connect: {
      auto source = decode<NodeId>(r);
      auto dest = decode<NodeId>(r);
      Qos qos;
      qos.rate_bps = r.u64();
      qos.key_len = r.u32();
      qos.supplier = get_opt(r);
      std::optional<Ksid> ksid;
      if (r.u8()) ksid = decode<Ksid>(r);
      r.expect_done();
      encode(out, kms_.open_connect(source, dest, qos, ksid));
      break;
    }
    case Verb::get_key: {
      auto ksid = decode<Ksid>(r);
      r.expect_done();
      put_key(out, kms_.get_key(ksid));
      break;
    }
    case Verb::close: {
      auto ksid = decode<Ksid>(r);
      r.expect_done();
      kms_.close(ksid);
      break;
    }
    case Verb::get_key_014: {
      auto requester = decode<NodeId>(r);
      auto peer = decode<NodeId>(r);
      auto number = r.u32();
      auto size = r.u32();
      auto supplier = get_opt(r);
      auto ownership = r.u8();
      if (ownership > 1) throw DecodeError("bad ownership");
      r.expect_done();
      put_keys(out, kms_.get_key_014(requester, peer, number, size, supplier,
                                     static_cast<Ownership>(ownership)));
      break;
    }
    case Verb::get_key_with_ids: {
      auto requester = decode<NodeId>(r);
      auto peer = decode<NodeId>(r);
      auto n = r.u32();
      if (n > kMaxIds) throw DecodeError("too many ids");
      std::vector<KeyId> ids;
      for (std::uint32_t i = 0; i < n; ++i) ids.push_back(decode<KeyId>(r));
      auto supplier = get_opt(r);
      r.expect_done();
      put_keys(out, kms_.get_key_with_ids(requester, peer, ids, supplier));
      break;
    }
    case Verb::push_key: {
      auto supplier = r.str(256);
      auto entry = decode<KeyEntry>(r);
      r.expect_done();
      out.u8(static_cast<std::uint8_t>(kms_.push_key(supplier, entry)));
      break;
    }
    default:
      throw KmsError(Errc::invalid_request, "unknown verb");
  }
  return std::move(out).take();
}

KmsClient KmsClient::loopback(KmsService& service) {
  return KmsClient([&service](const Bytes& req) { return service.handle(req); });
}

Reader KmsClient::call(Verb verb, const Writer& body, Bytes& storage) {
  Writer req;
  req.u8(static_cast<std::uint8_t>(verb));
  req.raw(body.data());
  storage = transport_(req.data());
  Reader r(storage);
  auto status = r.u8();
  if (status != 0) {
    auto what = r.str();
    std::optional<std::int64_t> retry;
    if (r.u8()) retry = r.i64();
    throw KmsError(static_cast<Errc>(status), what, retry);
  }
  return r;
}

Ksid KmsClient::open_connect(const NodeId& source, const NodeId& destination, const Qos& qos,
                             std::optional<Ksid> ksid) {
  Writer w;
  encode(w, source);
  encode(w, destination);
  w.u64(qos.rate_bps);
  w.u32(qos.key_len);
  put_opt(w, qos.supplier);
  w.u8(ksid ? 1 : 0);
  if (ksid) encode(w, *ksid);
  Bytes buf;
  auto r = call(Verb::open_connect, w, buf);
  auto id = decode<Ksid>(r);
  r.expect_done();
  return id;
}

DeliveredKey KmsClient::get_key(const Ksid& ksid) {
  Writer w;
  encode(w, ksid);
  Bytes buf;
  auto r = call(Verb::get_key, w, buf);
  auto k = get_key_body(r);
  r.expect_done();
  return k;
}

void KmsClient::close(const Ksid& ksid) {
  Writer w;
  encode(w, ksid);
  Bytes buf;
  call(Verb::close, w, buf).expect_done();
}

std::vector<DeliveredKey> KmsClient::get_key_014(const NodeId& requester, const NodeId& peer,
                                                 std::size_t number, std::size_t size,
                                                 const std::optional<std::string>& supplier,
                                                 Ownership ownership) {
  Writer w;
  encode(w, requester);
  encode(w, peer);
  w.u32(static_cast<std::uint32_t>(number));
  w.u32(static_cast<std::uint32_t>(size));
  put_opt(w, supplier);
  w.u8(static_cast<std::uint8_t>(ownership));
  Bytes buf;
  auto r = call(Verb::get_key_014, w, buf);
  auto keys = get_keys(r);
  r.expect_done();
  return keys;
}

std::vector<DeliveredKey> KmsClient::get_key_with_ids(const NodeId& requester, const NodeId& peer,
                                                      const std::vector<KeyId>& ids,
                                                      const std::optional<std::string>& supplier) {
  Writer w;
  encode(w, requester);
  encode(w, peer);
  w.u32(static_cast<std::uint32_t>(ids.size()));
  for (const auto& id : ids) encode(w, id);
  put_opt(w, supplier);
  Bytes buf;
  auto r = call(Verb::get_key_with_ids, w, buf);
  auto keys = get_keys(r);
  r.expect_done();
  return keys;
}

PushResult KmsClient::push_key(const std::string& supplier_id, const KeyEntry& entry) {
  Writer w;
  w.str(supplier_id);
  encode(w, entry);
  Bytes buf;
  auto r = call(Verb::push_key, w, buf);
  auto res = r.u8();
  r.expect_done();
  if (res > 1) throw DecodeError("bad push result");
  return static_cast<PushResult>(res);
}

}  // namespace qkdnet::kms
