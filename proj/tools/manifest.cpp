#include "manifest.hpp"

#include <ctime>
#include <fstream>
#include <memory>
#include <vector>

#include <openssl/evp.h>

#include "equidesc/core.hpp"

namespace equidesc::cli {

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest initialization failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

RunManifest::RunManifest(std::string command, std::uint64_t seed)
    : command_(std::move(command)),
      seed_(seed),
      started_(std::chrono::system_clock::now()),
      timer_(std::chrono::steady_clock::now()) {}

void RunManifest::add_input(const std::string& path) { inputs_[path] = sha256_file(path); }

void RunManifest::add_output(const std::string& path) { outputs_[path] = sha256_file(path); }

void RunManifest::write(const std::string& path) const {
  nlohmann::ordered_json j;
  j["command"] = command_;
  j["tool_version"] = kToolVersion;
  j["seed"] = seed_;
  j["config"] = config_;
  j["inputs"] = inputs_;
  j["outputs"] = outputs_;
  if (!result_.is_null()) j["result"] = result_;

  const std::time_t t = std::chrono::system_clock::to_time_t(started_);
  std::tm utc{};
  gmtime_r(&t, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &utc);
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - timer_).count();
  j["wall_clock"] = {{"started_utc", stamp}, {"elapsed_seconds", elapsed}};

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest '" + path + "'");
  out << j.dump(2) << "\n";
}

}  // namespace equidesc::cli
