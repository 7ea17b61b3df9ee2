/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
// Generates one phantom study, trains a toy DenseNet3D for a few epochs on a
// handful of patients and writes a GradCAM overlay for every series type.
//
//   demo_phantom_gradcam OUT_DIR [EPOCHS]

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "mriseq/mriseq.hpp"

int main(int argc, char** argv) {
  using namespace mriseq;
  if (argc < 2) {
    std::cerr << "usage: " << argv[0] << " OUT_DIR [EPOCHS]\n";
    return 2;
  }
  const std::filesystem::path out = argv[1];
  const int epochs = argc > 2 ? std::atoi(argv[2]) : 3;

  PhantomConfig pc;
  pc.n_patients = 8;
  pc.seed = 11;
  const auto manifest = generate_dataset(pc, out / "data");

  TrainConfig tc;
  tc.epochs = epochs;
  tc.folds = 1;
  tc.seed = 11;
  tc.preprocess = PreprocessConfig::toy();
  tc.model = ModelConfig::toy_densenet();
  TrainOptions opt;
  opt.log = [](const std::string& s) { std::cerr << s << '\n'; };
  auto cv = train_cv(manifest, tc, out / "run", opt);

  auto& model = cv.ensemble.members.front();
  const auto study = generate_study(pc, "demo", "S00");
  for (std::size_t i = 0; i < study.size(); ++i) {
    const auto pre = preprocess_pipeline(study[i], tc.preprocess);
    const auto pred = predict_preprocessed(cv.ensemble, pre);
    const auto sal = gradcam(model, pre, static_cast<int>(i));
    const auto name = std::string(label_name(label_from_index(i)));
    export_overlay(pre, sal, 2, pre.dims()[2] / 2, out / (name + "_gradcam.ppm"));
    std::cout << name << " -> predicted " << label_name(pred.label) << '\n';
  }
  return 0;
}
