#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "neural.hpp"
#include "telemetry.hpp"

// The two learned models: a denoising autoencoder that compresses a 34x5
// behavioural pattern into a 62-element encoding, and a bidirectional
// recurrent classifier over that encoding with a confidence threshold.

namespace twinforge::models {

using nlohmann::json;
using telemetry::BehaviouralPattern;
using telemetry::DatasetSplit;

constexpr int kEncodingSize = 62;
constexpr int kFlatPatternSize = telemetry::kWindowRows * telemetry::kFeatureCount;

struct EncodedPattern {
  Vector values;  // kEncodingSize
  std::optional<int> dt_hint;
};

struct ThresholdConfig {
  double tau = 0.695;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("tau must lie in [0,1]");
  }
};

enum class Verdict { Accept, RejectOoc };

struct Prediction {
  Vector scores;
  int best_class = 0;
  double confidence = 0.0;
  Verdict verdict = Verdict::RejectOoc;
};

inline Prediction prediction_from_scores(const Vector& scores, const ThresholdConfig& thr) {
  thr.validate();
  if (scores.size() < 1) throw DimensionError("empty score vector");
  Prediction p;
  p.scores = scores;
  Eigen::Index best = 0;
  scores.maxCoeff(&best);
  p.best_class = static_cast<int>(best);
  p.confidence = scores(best);
  p.verdict = p.confidence >= thr.tau ? Verdict::Accept : Verdict::RejectOoc;
  return p;
}

inline Vector flatten_pattern(const Matrix& values) {
  if (values.rows() != telemetry::kWindowRows || values.cols() != telemetry::kFeatureCount)
    throw DimensionError("behavioural pattern must be 34x5");
  Vector flat(kFlatPatternSize);
  for (int i = 0; i < telemetry::kWindowRows; ++i)
    for (int f = 0; f < telemetry::kFeatureCount; ++f)
      flat(i * telemetry::kFeatureCount + f) = values(i, f);
  return flat;
}

inline Matrix unflatten_pattern(const Vector& flat) {
  if (flat.size() != kFlatPatternSize) throw DimensionError("flattened pattern must have 170 values");
  Matrix values(telemetry::kWindowRows, telemetry::kFeatureCount);
  for (int i = 0; i < telemetry::kWindowRows; ++i)
    for (int f = 0; f < telemetry::kFeatureCount; ++f)
      values(i, f) = flat(i * telemetry::kFeatureCount + f);
  return values;
}

// ---------------------------------------------------------------------------
// Denoising autoencoder. Encoder: tanh dense + layer norm + dropout per
// hidden stage, widths narrowing to the encoding size. Decoder mirrors the
// widths back and finishes with a sigmoid reconstruction layer.

class DaeModel {
 public:
  static std::vector<int> default_widths() { return {170, 144, 120, 100, 82, 62}; }

  DaeModel(std::vector<int> widths, double dropout_rate, std::uint64_t seed)
      : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ArgumentError("autoencoder needs at least two widths");
    for (std::size_t i = 1; i < widths_.size(); ++i)
      if (widths_[i] < 1 || widths_[i] >= widths_[i - 1])
        throw ArgumentError("autoencoder widths must narrow strictly");
    const std::size_t k = widths_.size() - 1;
    for (std::size_t i = 0; i < k; ++i) {
      encoder_.add(std::make_unique<nn::Dense>(widths_[i], widths_[i + 1], nn::Activation::Tanh,
                                               mix_seed(seed, 0xe0, i)));
      encoder_.add(std::make_unique<nn::LayerNorm>(widths_[i + 1]));
      encoder_.add(std::make_unique<nn::Dropout>(dropout_rate, mix_seed(seed, 0xe1, i)));
    }
    for (std::size_t i = k; i-- > 1;) {
      decoder_.add(std::make_unique<nn::Dense>(widths_[i + 1], widths_[i], nn::Activation::Tanh,
                                               mix_seed(seed, 0xd0, i)));
      decoder_.add(std::make_unique<nn::LayerNorm>(widths_[i]));
      decoder_.add(std::make_unique<nn::Dropout>(dropout_rate, mix_seed(seed, 0xd1, i)));
    }
    decoder_.add(std::make_unique<nn::Dense>(widths_[1], widths_[0], nn::Activation::Sigmoid,
                                             mix_seed(seed, 0xd0, 0)));
  }

  const std::vector<int>& widths() const { return widths_; }
  int input_size() const { return widths_.front(); }
  int encoding_size() const { return widths_.back(); }

  Matrix reconstruct_training(const Matrix& x) {
    return decoder_.forward(encoder_.forward(x, true), true);
  }

  void backward(const Matrix& d_out) { encoder_.backward(decoder_.backward(d_out)); }

  Matrix reconstruct(const Matrix& x) const { return decoder_.apply(encoder_.apply(x)); }
  Matrix encode_batch(const Matrix& x) const { return encoder_.apply(x); }
  Matrix decode_batch(const Matrix& z) const { return decoder_.apply(z); }

  std::vector<nn::ParamView> params() {
    auto out = encoder_.params();
    auto dec = decoder_.params();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

  void zero_grads() {
    encoder_.zero_grads();
    decoder_.zero_grads();
  }

  void save(std::ostream& os) const {
    io::write_magic(os, "TWNN");
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(encoder_.size() + decoder_.size()));
    encoder_.save_layers(os);
    decoder_.save_layers(os);
  }

  static DaeModel load(std::istream& is) {
    io::expect_magic(is, "TWNN", "autoencoder weights");
    if (io::read_u32(is) != 1) throw FormatError("autoencoder weights: unsupported version");
    const std::uint32_t count = io::read_u32(is);
    if (count < 4 || (count + 2) % 6 != 0)
      throw FormatError("autoencoder weights: unexpected layer count " + std::to_string(count));
    const std::size_t k = (count + 2) / 6;

    std::vector<std::unique_ptr<nn::Layer>> layers;
    layers.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) layers.push_back(nn::read_layer(is));

    auto dense_at = [&](std::size_t i) -> nn::Dense* {
      auto* d = dynamic_cast<nn::Dense*>(layers[i].get());
      if (!d) throw FormatError("autoencoder weights: expected dense record at slot " +
                                std::to_string(i));
      return d;
    };

    std::vector<int> widths;
    widths.push_back(static_cast<int>(dense_at(0)->input_size()));
    for (std::size_t i = 0; i < k; ++i)
      widths.push_back(static_cast<int>(dense_at(3 * i)->output_size()));

    DaeModel model(widths, 0.0, 0);
    model.encoder_ = nn::Mlp();
    model.decoder_ = nn::Mlp();
    for (std::size_t i = 0; i < 3 * k; ++i) {
      validate_block_slot(layers, i, i % 3);
      model.encoder_.add(std::move(layers[i]));
    }
    for (std::size_t i = 3 * k; i + 1 < count; ++i) {
      validate_block_slot(layers, i, (i - 3 * k) % 3);
      model.decoder_.add(std::move(layers[i]));
    }
    auto* final_dense = dense_at(count - 1);
    if (final_dense->activation() != nn::Activation::Sigmoid)
      throw FormatError("autoencoder weights: reconstruction layer must be sigmoid");
    if (final_dense->output_size() != widths.front())
      throw FormatError("autoencoder weights: reconstruction width mismatch");
    model.decoder_.add(std::move(layers[count - 1]));

    for (std::size_t i = 1; i + 1 < widths.size(); ++i) {
      const auto* d = dynamic_cast<const nn::Dense*>(&model.decoder_.layer(3 * (k - 1 - i)));
      if (!d || d->output_size() != widths[i] || d->input_size() != widths[i + 1])
        throw FormatError("autoencoder weights: decoder does not mirror encoder widths");
    }
    return model;
  }

 private:
  nn::Mlp encoder_, decoder_;
  std::vector<int> widths_;

  static void validate_block_slot(const std::vector<std::unique_ptr<nn::Layer>>& layers,
                                  std::size_t i, std::size_t role) {
    const nn::Layer* l = layers[i].get();
    const bool ok = (role == 0 && dynamic_cast<const nn::Dense*>(l)) ||
                    (role == 1 && dynamic_cast<const nn::LayerNorm*>(l)) ||
                    (role == 2 && dynamic_cast<const nn::Dropout*>(l));
    if (!ok)
      throw FormatError("autoencoder weights: unexpected record kind at slot " + std::to_string(i));
  }
};

inline EncodedPattern encode(const DaeModel& model, const BehaviouralPattern& pattern) {
  if (model.input_size() != kFlatPatternSize)
    throw DimensionError("model does not accept 34x5 patterns");
  Matrix z = model.encode_batch(flatten_pattern(pattern.values).transpose());
  EncodedPattern out;
  out.values = z.row(0).transpose();
  out.dt_hint = pattern.dt_id;
  return out;
}

inline Matrix decode(const DaeModel& model, const EncodedPattern& enc) {
  if (enc.values.size() != model.encoding_size())
    throw DimensionError("encoded pattern has length " + std::to_string(enc.values.size()) +
                         "; expected " + std::to_string(model.encoding_size()));
  Matrix flat = model.decode_batch(enc.values.transpose());
  Matrix values = unflatten_pattern(flat.row(0).transpose());
  return values.cwiseMax(0.0).cwiseMin(1.0);
}

struct DaeTrainReport {
  std::vector<double> train_mse, test_mse;
  double final_train_mse = 0.0;
  double final_test_mse = 0.0;
  double baseline_test_mse = 0.0;

  json to_json() const {
    return json{{"train_mse", train_mse},
                {"test_mse", test_mse},
                {"final_train_mse", final_train_mse},
                {"final_test_mse", final_test_mse},
                {"baseline_test_mse", baseline_test_mse}};
  }
};

namespace detail {

inline Matrix stack_patterns(const std::vector<BehaviouralPattern>& patterns) {
  if (patterns.empty()) throw ArgumentError("empty pattern set");
  Matrix x(static_cast<Eigen::Index>(patterns.size()), kFlatPatternSize);
  for (std::size_t i = 0; i < patterns.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = flatten_pattern(patterns[i].values).transpose();
  return x;
}

inline double eval_mse(const DaeModel& model, const Matrix& x) {
  Matrix y = model.reconstruct(x);
  return (y - x).array().square().sum() / static_cast<double>(x.size());
}

// Mean squared error of the best constant predictor: per-dimension mean.
inline double constant_baseline_mse(const Matrix& x) {
  Eigen::RowVectorXd mean = x.colwise().mean();
  return (x.rowwise() - mean).array().square().sum() / static_cast<double>(x.size());
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace detail

inline DaeModel train_dae(const DatasetSplit& dataset, const nn::TrainConfig& config,
                          DaeTrainReport* report = nullptr) {
  config.validate();
  if (dataset.train.empty()) throw ArgumentError("training split is empty");
  if (dataset.test.empty()) throw ArgumentError("test split is empty");

  DaeModel model(DaeModel::default_widths(), config.dropout_rate, config.seed);
  Matrix x_train = detail::stack_patterns(dataset.train);
  Matrix x_test = detail::stack_patterns(dataset.test);

  auto params = model.params();
  nn::AdamState adam;
  adam.init(params);
  std::mt19937_64 noise_rng(mix_seed(config.seed, 0xa0));
  std::normal_distribution<double> gauss(0.0, 1.0);

  DaeTrainReport local;
  DaeTrainReport& rep = report ? *report : local;
  rep.baseline_test_mse = detail::constant_baseline_mse(x_test);

  const auto n = static_cast<std::size_t>(x_train.rows());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto idx = detail::shuffled_indices(n, mix_seed(config.seed, 0xe9, epoch));
    try {
      for (std::size_t start = 0; start < n; start += config.batch_size) {
        const auto b = std::min<std::size_t>(config.batch_size, n - start);
        Matrix clean(static_cast<Eigen::Index>(b), kFlatPatternSize);
        for (std::size_t r = 0; r < b; ++r)
          clean.row(static_cast<Eigen::Index>(r)) =
              x_train.row(static_cast<Eigen::Index>(idx[start + r]));
        Matrix noisy = clean;
        if (config.input_noise_sigma > 0.0)
          for (Eigen::Index i = 0; i < noisy.rows(); ++i)
            for (Eigen::Index j = 0; j < noisy.cols(); ++j)
              noisy(i, j) += config.input_noise_sigma * gauss(noise_rng);
        model.zero_grads();
        Matrix out = model.reconstruct_training(noisy);
        nn::LossResult loss = nn::mse_loss(out, clean);
        model.backward(loss.grad);
        nn::optimize_step(params, adam, config);
      }
    } catch (const NumericError& e) {
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    rep.train_mse.push_back(detail::eval_mse(model, x_train));
    rep.test_mse.push_back(detail::eval_mse(model, x_test));
  }

  rep.final_train_mse = detail::eval_mse(model, x_train);
  rep.final_test_mse = detail::eval_mse(model, x_test);
  return model;
}

inline void save_dae(const std::filesystem::path& path, const DaeModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
  model.save(os);
}

inline DaeModel load_dae(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open " + path.string());
  return DaeModel::load(is);
}

// ---------------------------------------------------------------------------
// Classifier: the encoding is consumed as a length-62 sequence of scalars by
// a bidirectional recurrent layer; both final states feed a softmax head.

struct LabelledEncodings {
  Matrix values;  // n x sequence length
  std::vector<int> labels;
};

class ClassifierModel {
 public:
  ClassifierModel(int n_classes, int hidden, int seq_len, std::uint64_t seed)
      : bigru_(1, hidden, mix_seed(seed, 0xb6)),
        head_(2 * hidden, n_classes, nn::Activation::Softmax, mix_seed(seed, 0x4ead)),
        n_classes_(n_classes), seq_len_(seq_len) {
    if (n_classes < 2) throw ArgumentError("classifier needs at least two classes");
    if (seq_len < 1) throw ArgumentError("sequence length must be positive");
  }

  int n_classes() const { return n_classes_; }
  int hidden_size() const { return static_cast<int>(bigru_.forward_cell.hidden_size()); }
  int sequence_length() const { return seq_len_; }

  Matrix scores(const Matrix& encodings) const {
    if (encodings.cols() != seq_len_)
      throw DimensionError("encoded pattern has length " + std::to_string(encodings.cols()) +
                           "; expected " + std::to_string(seq_len_));
    return head_.apply(bigru_run(bigru_, as_sequence(encodings)));
  }

  nn::BiGru& bigru() { return bigru_; }
  const nn::BiGru& bigru() const { return bigru_; }
  nn::Dense& head() { return head_; }

  static std::vector<Matrix> as_sequence(const Matrix& encodings) {
    std::vector<Matrix> xs;
    xs.reserve(static_cast<std::size_t>(encodings.cols()));
    for (Eigen::Index t = 0; t < encodings.cols(); ++t) xs.push_back(encodings.col(t));
    return xs;
  }

  void save(std::ostream& os) const {
    io::write_magic(os, "TWNN");
    io::write_u32(os, 1);
    io::write_u32(os, 3);
    bigru_.forward_cell.save(os);
    bigru_.backward_cell.save(os);
    head_.save(os);
  }

  static ClassifierModel load(std::istream& is, int seq_len = kEncodingSize) {
    io::expect_magic(is, "TWNN", "classifier weights");
    if (io::read_u32(is) != 1) throw FormatError("classifier weights: unsupported version");
    if (io::read_u32(is) != 3) throw FormatError("classifier weights: expected 3 records");
    nn::GruCell fwd = nn::GruCell::read(is);
    nn::GruCell bwd = nn::GruCell::read(is);
    if (io::read_u8(is) != 1) throw FormatError("classifier weights: expected dense head record");
    auto head = nn::Dense::read(is);
    if (fwd.hidden_size() != bwd.hidden_size() || fwd.input_size() != 1 || bwd.input_size() != 1)
      throw FormatError("classifier weights: recurrent cells disagree");
    if (head->input_size() != 2 * fwd.hidden_size())
      throw FormatError("classifier weights: head width mismatch");
    if (head->activation() != nn::Activation::Softmax)
      throw FormatError("classifier weights: head must be softmax");
    ClassifierModel model(static_cast<int>(head->output_size()),
                          static_cast<int>(fwd.hidden_size()), seq_len, 0);
    model.bigru_.forward_cell = std::move(fwd);
    model.bigru_.backward_cell = std::move(bwd);
    model.head_.weights() = head->weights();
    model.head_.bias() = head->bias();
    return model;
  }

 private:
  nn::BiGru bigru_;
  nn::Dense head_;
  int n_classes_;
  int seq_len_;
};

inline Prediction predict(const ClassifierModel& model, const EncodedPattern& enc,
                          const ThresholdConfig& thr) {
  if (enc.values.size() != model.sequence_length())
    throw DimensionError("encoded pattern has length " + std::to_string(enc.values.size()) +
                         "; expected " + std::to_string(model.sequence_length()));
  Matrix s = model.scores(enc.values.transpose());
  return prediction_from_scores(s.row(0).transpose(), thr);
}

inline std::vector<Prediction> predict_batch(const ClassifierModel& model, const Matrix& encodings,
                                             const ThresholdConfig& thr) {
  Matrix s = model.scores(encodings);
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    out.push_back(prediction_from_scores(s.row(i).transpose(), thr));
  return out;
}

struct ClassifierTrainReport {
  std::vector<double> train_loss, train_accuracy, test_loss, test_accuracy;
  double final_test_accuracy = 0.0;

  json to_json() const {
    return json{{"train_loss", train_loss},
                {"train_accuracy", train_accuracy},
                {"test_loss", test_loss},
                {"test_accuracy", test_accuracy},
                {"final_test_accuracy", final_test_accuracy}};
  }
};

namespace detail {

inline std::pair<double, double> eval_classifier(const ClassifierModel& model,
                                                 const LabelledEncodings& data) {
  Matrix probs = model.scores(data.values);
  nn::LossResult loss = nn::cross_entropy_loss(probs, data.labels);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    probs.row(i).maxCoeff(&best);
    if (static_cast<int>(best) == data.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return {loss.value, static_cast<double>(correct) / static_cast<double>(probs.rows())};
}

}  // namespace detail

inline ClassifierModel train_classifier(const LabelledEncodings& train,
                                        const LabelledEncodings& test,
                                        const nn::TrainConfig& config, int n_classes,
                                        int hidden = 32,
                                        ClassifierTrainReport* report = nullptr) {
  config.validate();
  if (train.values.rows() < 1) throw ArgumentError("training encodings are empty");
  if (static_cast<Eigen::Index>(train.labels.size()) != train.values.rows() ||
      static_cast<Eigen::Index>(test.labels.size()) != test.values.rows())
    throw ArgumentError("one label per encoding required");
  if (test.values.rows() > 0 && test.values.cols() != train.values.cols())
    throw DimensionError("train and test encodings have different lengths");
  for (int y : train.labels)
    if (y < 0 || y >= n_classes)
      throw ArgumentError("label " + std::to_string(y) + " out of range [0," +
                          std::to_string(n_classes) + ")");
  for (int y : test.labels)
    if (y < 0 || y >= n_classes)
      throw ArgumentError("label " + std::to_string(y) + " out of range [0," +
                          std::to_string(n_classes) + ")");

  ClassifierModel model(n_classes, hidden, static_cast<int>(train.values.cols()), config.seed);
  nn::BiGruGrads grads(model.bigru());
  std::vector<nn::ParamView> params =
      nn::gru_params(model.bigru().forward_cell, grads.fwd);
  {
    auto bwd = nn::gru_params(model.bigru().backward_cell, grads.bwd);
    params.insert(params.end(), bwd.begin(), bwd.end());
    model.head().collect_params(params);
  }
  nn::AdamState adam;
  adam.init(params);

  ClassifierTrainReport local;
  ClassifierTrainReport& rep = report ? *report : local;

  const auto n = static_cast<std::size_t>(train.values.rows());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto idx = detail::shuffled_indices(n, mix_seed(config.seed, 0xc9, epoch));
    try {
      for (std::size_t start = 0; start < n; start += config.batch_size) {
        const auto b = std::min<std::size_t>(config.batch_size, n - start);
        Matrix batch(static_cast<Eigen::Index>(b), train.values.cols());
        std::vector<int> labels(b);
        for (std::size_t r = 0; r < b; ++r) {
          batch.row(static_cast<Eigen::Index>(r)) =
              train.values.row(static_cast<Eigen::Index>(idx[start + r]));
          labels[r] = train.labels[idx[start + r]];
        }
        nn::BiGruCache cache;
        Matrix features = nn::bigru_run(model.bigru(), ClassifierModel::as_sequence(batch), &cache);
        Matrix probs = model.head().forward(features, true);
        nn::LossResult loss = nn::cross_entropy_loss(probs, labels);
        grads.zero();
        model.head().zero_grads();
        Matrix d_features = model.head().backward(loss.grad);
        nn::bigru_backward(model.bigru(), cache, d_features, grads);
        nn::optimize_step(params, adam, config);
      }
    } catch (const NumericError& e) {
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    auto [train_loss, train_acc] = detail::eval_classifier(model, train);
    rep.train_loss.push_back(train_loss);
    rep.train_accuracy.push_back(train_acc);
    if (test.values.rows() > 0) {
      auto [test_loss, test_acc] = detail::eval_classifier(model, test);
      rep.test_loss.push_back(test_loss);
      rep.test_accuracy.push_back(test_acc);
    }
  }

  rep.final_test_accuracy =
      test.values.rows() > 0 ? detail::eval_classifier(model, test).second : 0.0;
  return model;
}

inline void save_classifier(const std::filesystem::path& path, const ClassifierModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
  model.save(os);
}

inline ClassifierModel load_classifier(const std::filesystem::path& path,
                                       int seq_len = kEncodingSize) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open " + path.string());
  return ClassifierModel::load(is, seq_len);
}

// Encode a labelled pattern set in one batched pass.
inline LabelledEncodings encode_all(const DaeModel& dae,
                                    const std::vector<BehaviouralPattern>& patterns) {
  LabelledEncodings out;
  out.values = dae.encode_batch(detail::stack_patterns(patterns));
  out.labels.reserve(patterns.size());
  for (const auto& p : patterns) out.labels.push_back(p.dt_id);
  return out;
}

}  // namespace twinforge::models
